// SPDX-License-Identifier: Apache-2.0

//! `latentswap`: train latent mixers, run the latent-space experiments and
//! swap images against a seeded synthetic world.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentswap_core::{Error, Space};

#[derive(Parser, Debug)]
#[command(name = "latentswap", version, about = "Latent mixer training, analysis and swapping")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file and
/// are recorded in the manifest.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Settings file (TOML).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any setting, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Latent-penalty weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Mixer operating space: Z, W or W+.
    #[arg(long, global = true)]
    pub space: Option<Space>,
    /// Worker threads (per-pair passes for training, cells for experiments).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the frozen world and save it with its checksum.
    World,
    /// Generate images from random mapped codes.
    Generate {
        #[arg(long, default_value_t = 2)]
        count: usize,
        /// Seed of the latent stream.
        #[arg(long = "latent-seed", default_value_t = 0)]
        latent_seed: u64,
    },
    /// Train one mixer.
    Train,
    /// Train one mixer per λ and tabulate losses and metrics.
    Sweep {
        /// Comma-separated λ grid (overrides `experiment.lambdas`).
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// Train mixers in Z, W and W+.
    Spaces,
    /// Swap only one layer group at a time.
    Layerwise {
        /// Trained W+ mixer; trains one from the config when absent.
        #[arg(long)]
        mixer: Option<PathBuf>,
    },
    /// Fit the L_lp growth exponent of a λ = 0 run.
    Diffusion {
        /// Existing run directory; trains one from the config when absent.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Principal directions of W and their edit effects.
    Pca,
    /// Swap the identity of `source` onto `target`.
    Swap {
        #[arg(long)]
        mixer: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Invert an image into W and tune the generator around it.
    Invert {
        #[arg(long)]
        image: PathBuf,
    },
}

/// Exit status: 2 configuration or input error, 3 numerical abort, 4 I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Abort(_) | Error::NonFinite(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::World => commands::world(c),
        Command::Generate { count, latent_seed } => commands::generate(c, count, latent_seed),
        Command::Train => commands::train(c),
        Command::Sweep { lambdas } => commands::sweep(c, lambdas.as_deref()),
        Command::Spaces => commands::spaces(c),
        Command::Layerwise { mixer } => commands::layerwise(c, mixer.as_deref()),
        Command::Diffusion { run } => commands::diffusion(c, run.as_deref()),
        Command::Pca => commands::pca(c),
        Command::Swap { mixer, source, target } => commands::swap(c, &mixer, &source, &target),
        Command::Invert { image } => commands::invert(c, &image),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

