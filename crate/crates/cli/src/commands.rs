// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use latentswap_core::analysis::{
    diffusion_report, edit_effects, edit_effects_csv, equilibrium_ratio, eval_metrics, eval_pairs, lambda_sweep,
    layerwise_csv, layerwise_study, log_log_dat, loss_curves, pca_directions, retrieval_accuracy, space_ablation,
    spaces_csv,
};
use latentswap_core::inversion::{invert as run_inversion, pivotal_tune, swap_images};
use latentswap_core::rng::stream;
use latentswap_core::trainer::{write_run, Trainer};
use latentswap_core::{Error, FrozenWorld, Image, LatentCode, MixerStack, Result, RunLog, Space};

use crate::config::RunConfig;
use crate::Common;

/// Resolved settings for one invocation.
struct Ctx {
    cfg: RunConfig,
    source: Option<String>,
    /// `key=value (origin)` for every flag that overrode the file.
    overrides: Vec<String>,
    world: FrozenWorld,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Ctx> {
    let (mut cfg, source) = match &c.config {
        Some(p) => {
            let (cfg, text) = RunConfig::load(p)?;
            (cfg, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    let mut overrides = Vec::new();
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
        overrides.push(format!("{}={} (--set)", k.trim(), v.trim()));
    }
    let flags: [(&str, &str, Option<String>); 7] = [
        ("loss.lambda", "--lambda", c.lambda.map(|v| format!("{v:?}"))),
        ("train.steps", "--steps", c.steps.map(|v| v.to_string())),
        ("train.batch_size", "--batch-size", c.batch_size.map(|v| v.to_string())),
        ("optim.learning_rate", "--lr", c.lr.map(|v| format!("{v:?}"))),
        ("train.seed", "--seed", c.seed.map(|v| v.to_string())),
        ("mixer.space", "--space", c.space.map(|v| v.to_string())),
        ("train.jobs", "--jobs", c.jobs.map(|v| v.to_string())),
    ];
    for (key, flag, v) in flags {
        if let Some(v) = v {
            cfg.set(key, &v)?;
            overrides.push(format!("{key}={v} ({flag})"));
        }
    }
    if let Some(j) = c.jobs {
        cfg.experiment.jobs = j;
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
        overrides.push(format!("output.dir={} (--out)", o.display()));
    }
    cfg.validate()?;
    let world = FrozenWorld::seed(cfg.world_seed, cfg.world)?;
    let out = cfg.output.clone();
    fs::create_dir_all(&out)?;
    Ok(Ctx {
        cfg,
        source,
        overrides,
        world,
        out,
    })
}

impl Ctx {
    fn write(&self, name: &str, text: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    fn manifest(&self, command: &str) -> Result<()> {
        let mut header = vec![
            format!("latentswap {} manifest", env!("CARGO_PKG_VERSION")),
            format!("command: {command}"),
            format!("world checksum: {}", self.world.checksum()?),
        ];
        if self.overrides.is_empty() {
            header.push("overrides: none".into());
        }
        header.extend(self.overrides.iter().map(|o| format!("override: {o}")));
        self.write("manifest.txt", self.cfg.manifest(&header, self.source.as_deref()))?;
        Ok(())
    }
}

fn latent_csv(code: &LatentCode) -> String {
    let d = code.width();
    code.data()
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn world(c: &Common) -> Result<()> {
    let ctx = setup(c)?;
    ctx.world.save(&ctx.out.join("world.lsw"))?;
    ctx.manifest("world")?;
    println!("{}", ctx.world.checksum()?);
    Ok(())
}

pub fn generate(c: &Common, count: usize, latent_seed: u64) -> Result<()> {
    let ctx = setup(c)?;
    let mut rng = stream(latent_seed, "cli/generate");
    for i in 0..count {
        let w = ctx.world.sample_w(&mut rng)?;
        let img = ctx.world.generate(&ctx.world.broadcast_w(&w)?)?;
        img.save(&ctx.out.join(format!("image_{i}.lsimg")))?;
        ctx.write(&format!("image_{i}.ppm"), img.to_netpbm())?;
        ctx.write(&format!("latent_{i}.csv"), latent_csv(&w))?;
    }
    ctx.manifest(&format!("generate --count {count} --latent-seed {latent_seed}"))?;
    println!("wrote {count} images to {}", ctx.out.display());
    Ok(())
}

fn train_into(ctx: &Ctx, dir: &Path) -> Result<(MixerStack, RunLog)> {
    let cfg = &ctx.cfg.train;
    fs::create_dir_all(dir)?;
    let (stack, log) = Trainer::new(&ctx.world, cfg.clone())?.run(Some(dir))?;
    write_run(dir, &ctx.world, cfg, &stack, &log, "train")?;
    let (id, lp) = loss_curves(&log);
    fs::write(dir.join("loss_id.dat"), id)?;
    fs::write(dir.join("loss_lp.dat"), lp)?;
    let f = log.final_window().ok_or_else(|| Error::Contract("no steps recorded".into()))?;
    println!(
        "trained {} steps: L_id {:.6} L_lp {:.6e} L_s {:.6} total {:.6} ratio {:.4}{}",
        log.len(),
        f.id_loss,
        f.lp_loss,
        f.shape_loss,
        f.total,
        equilibrium_ratio(cfg.weights.lambda, &f),
        log.stopped_early.map_or(String::new(), |s| format!(" (plateau at step {s})"))
    );
    Ok((stack, log))
}

pub fn train(c: &Common) -> Result<()> {
    let ctx = setup(c)?;
    train_into(&ctx, &ctx.out)?;
    // Replaces the trainer's manifest with the full run configuration.
    ctx.manifest("train")
}

pub fn sweep(c: &Common, lambdas: Option<&str>) -> Result<()> {
    let mut c = c.clone();
    if let Some(l) = lambdas {
        c.sets.push(format!("experiment.lambdas={l}"));
    }
    let ctx = setup(&c)?;
    let table = lambda_sweep(&ctx.world, &ctx.cfg.experiment_config(), &ctx.cfg.experiment.lambdas)?;
    ctx.write("sweep.csv", table.to_csv())?;
    for r in &table.rows {
        let (id, lp) = loss_curves(&r.cell.log);
        ctx.write(&format!("sweep_lambda_{:e}_id.dat", r.cell.lambda), id)?;
        ctx.write(&format!("sweep_lambda_{:e}_lp.dat", r.cell.lambda), lp)?;
        println!(
            "lambda {:e}: L_id {:.5} L_lp {:.4e} ratio {:.4} id_sim {:.4}{}",
            r.cell.lambda,
            r.cell.final_losses.id_loss,
            r.cell.final_losses.lp_loss,
            r.cell.ratio(),
            r.cell.eval.metrics.id_similarity,
            if r.divergent { " divergent" } else { "" }
        );
    }
    ctx.manifest("sweep")
}

pub fn spaces(c: &Common) -> Result<()> {
    let ctx = setup(c)?;
    let cells = space_ablation(&ctx.world, &ctx.cfg.experiment_config())?;
    ctx.write("spaces.csv", spaces_csv(&cells))?;
    for cell in &cells {
        println!(
            "{} (lambda {:e}): id_sim {:.4} expr_mse {:.5}",
            cell.space, cell.lambda, cell.eval.metrics.id_similarity, cell.eval.metrics.expression_mse
        );
    }
    ctx.manifest("spaces")
}

pub fn layerwise(c: &Common, mixer: Option<&Path>) -> Result<()> {
    let mut c = c.clone();
    if mixer.is_none() && c.space.is_none() {
        c.space = Some(Space::WPlus);
    }
    let ctx = setup(&c)?;
    let stack = match mixer {
        Some(p) => MixerStack::load(p)?.0,
        None => train_into(&ctx, &ctx.out.join("mixer_run"))?.0,
    };
    let pairs = eval_pairs(&ctx.world, Space::WPlus, ctx.cfg.experiment.eval_pairs, ctx.cfg.experiment.eval_seed)?;
    let rows = layerwise_study(&ctx.world, &stack, &pairs)?;
    ctx.write("layerwise.csv", layerwise_csv(&rows))?;
    for r in &rows {
        println!(
            "{}: id_sim {:.4} expr_mse {:.5}",
            r.group.map_or("all", |g| g.name()),
            r.eval.metrics.id_similarity,
            r.eval.metrics.expression_mse
        );
    }
    let acc = retrieval_accuracy(&ctx.world, &stack, ctx.cfg.experiment.retrieval, ctx.cfg.experiment.eval_seed)?;
    ctx.write("retrieval.csv", format!("gallery,accuracy\n{},{acc}\n", ctx.cfg.experiment.retrieval))?;
    println!("retrieval accuracy over {}: {acc:.3}", ctx.cfg.experiment.retrieval);
    ctx.manifest(&match mixer {
        Some(p) => format!("layerwise --mixer {}", p.display()),
        None => "layerwise".into(),
    })
}

fn require_zero_lambda(lambda: f64) -> Result<()> {
    if lambda != 0.0 {
        return Err(Error::Config(format!("diffusion fit requires a lambda=0 run, got lambda={lambda}")));
    }
    Ok(())
}

pub fn diffusion(c: &Common, run: Option<&Path>) -> Result<()> {
    let ctx = setup(c)?;
    let log = match run {
        Some(dir) => {
            let (run_cfg, _) = RunConfig::load(&dir.join("manifest.txt"))?;
            require_zero_lambda(run_cfg.train.weights.lambda)?;
            RunLog::from_metrics_csv(&fs::read_to_string(dir.join("metrics.csv"))?, run_cfg.train.log_window)?
        }
        None => {
            require_zero_lambda(ctx.cfg.train.weights.lambda)?;
            train_into(&ctx, &ctx.out.join("lambda0_run"))?.1
        }
    };
    let rep = diffusion_report(&log, ctx.cfg.experiment.window)?;
    ctx.write("diffusion.csv", rep.to_csv())?;
    ctx.write("diffusion_lp.dat", rep.to_dat())?;
    ctx.write("diffusion_loglog.dat", log_log_dat(&rep.series))?;
    println!(
        "nu = {:.4} over [{}, {}] (residual {:.3e}); late nu = {:.4} over [{}, {}]",
        rep.intermediate.exponent,
        rep.intermediate.step_lo,
        rep.intermediate.step_hi,
        rep.intermediate.residual,
        rep.late.exponent,
        rep.late.step_lo,
        rep.late.step_hi
    );
    ctx.manifest(&match run {
        Some(p) => format!("diffusion --run {}", p.display()),
        None => "diffusion".into(),
    })
}

pub fn pca(c: &Common) -> Result<()> {
    let ctx = setup(c)?;
    let e = &ctx.cfg.experiment;
    let p = pca_directions(&ctx.world, e.pca_samples, e.pca_components, e.pca_seed)?;
    p.save(&ctx.out.join("pca.bin"))?;
    let effects = edit_effects(&ctx.world, &p, e.edit_sigmas, e.edit_codes, e.pca_seed)?;
    ctx.write("edits.csv", edit_effects_csv(&effects))?;
    for (k, (v, fx)) in p.variances.iter().zip(&effects).enumerate() {
        println!(
            "component {k}: variance {v:.4e}, attribute change {:.4}, identity change {:.4}, ratio {:.3}",
            fx.attribute_change,
            fx.identity_change,
            fx.ratio()
        );
    }
    ctx.manifest("pca")
}

pub fn swap(c: &Common, mixer: &Path, source: &Path, target: &Path) -> Result<()> {
    let ctx = setup(c)?;
    let (stack, _) = MixerStack::load(mixer)?;
    let (src, tgt) = (Image::load(source)?, Image::load(target)?);
    let out = swap_images(&ctx.world, &stack, &src, &tgt, &ctx.cfg.inversion)?;
    out.image.save(&ctx.out.join("swap.lsimg"))?;
    ctx.write("swap.ppm", out.image.to_netpbm())?;
    let m = eval_metrics(&ctx.world, &src, &tgt, &out.image)?;
    let line = format!(
        "id_similarity={:.6} expression_mse={:.6e} pose_mse={:.6e}",
        m.id_similarity, m.expression_mse, m.pose_mse
    );
    ctx.write(
        "swap.csv",
        format!(
            "id_similarity,expression_mse,pose_mse,source_inversion_mse,target_inversion_mse,tuned_mse,invert_ms,tune_ms,mix_ms,generate_ms\n{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
            m.id_similarity,
            m.expression_mse,
            m.pose_mse,
            out.source.mse,
            out.target.mse,
            out.tuned.mse_after,
            out.invert_ms,
            out.tune_ms,
            out.mix_ms,
            out.generate_ms
        ),
    )?;
    println!("{line}");
    ctx.manifest(&format!(
        "swap --mixer {} --source {} --target {}",
        mixer.display(),
        source.display(),
        target.display()
    ))
}

pub fn invert(c: &Common, image: &Path) -> Result<()> {
    let ctx = setup(c)?;
    let img = Image::load(image)?;
    let cfg = &ctx.cfg.inversion;
    let inv = run_inversion(&ctx.world, &img, cfg)?;
    let tuned = pivotal_tune(&ctx.world, &[(&inv.w, &img)], cfg)?;
    ctx.write("inverted_w.csv", latent_csv(&inv.w))?;
    let recon = ctx.world.generate_using(&tuned.params, &ctx.world.broadcast_w(&inv.w)?)?;
    recon.save(&ctx.out.join("reconstruction.lsimg"))?;
    ctx.write("reconstruction.ppm", recon.to_netpbm())?;
    ctx.write(
        "invert.csv",
        format!(
            "inversion_mse,converged,tuned_mse_before,tuned_mse_after\n{},{},{},{}\n",
            inv.mse,
            inv.converged(cfg),
            tuned.mse_before,
            tuned.mse_after
        ),
    )?;
    println!(
        "inversion mse {:.4e} ({}), after tuning {:.4e}",
        inv.mse,
        if inv.converged(cfg) { "converged" } else { "not converged" },
        tuned.mse_after
    );
    ctx.manifest(&format!("invert --image {}", image.display()))
}
