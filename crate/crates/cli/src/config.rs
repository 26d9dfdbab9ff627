// SPDX-License-Identifier: Apache-2.0

//! Run configuration files (TOML): `[world]`, `[train]`, `[loss]`, `[mixer]`,
//! `[optim]`, `[experiment]`, `[inversion]` and `[output]` sections.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use latentswap_core::analysis::{ExperimentConfig, DEFAULT_LAMBDA_GRID, EVAL_PAIRS, RETRIEVAL_GALLERY};
use latentswap_core::inversion::InversionConfig;
use latentswap_core::settings::{self, value};
use latentswap_core::{Error, Result, TrainConfig, WorldConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub lambdas: Vec<f64>,
    pub eval_pairs: usize,
    pub eval_seed: u64,
    pub retrieval: usize,
    pub jobs: usize,
    /// Diffusion fit window; `None` means 10% to 50% of the run.
    pub window: Option<(usize, usize)>,
    pub pca_samples: usize,
    pub pca_components: usize,
    pub pca_seed: u64,
    /// Edit size in standard deviations for the edit-effect report.
    pub edit_sigmas: f64,
    pub edit_codes: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            eval_pairs: EVAL_PAIRS,
            eval_seed: 1,
            retrieval: RETRIEVAL_GALLERY,
            jobs: 1,
            window: None,
            pca_samples: 2000,
            pca_components: 8,
            pca_seed: 0,
            edit_sigmas: 2.0,
            edit_codes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub experiment: Experiment,
    pub inversion: InversionConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world_seed: 42,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            experiment: Experiment::default(),
            inversion: InversionConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Defaults overlaid with `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in settings::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Sets one dotted key; unknown keys are a config error.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("world.") {
            if k == "seed" {
                self.world_seed = value(key, raw)?;
                return Ok(());
            }
            if self.world.apply(k, raw)? {
                return Ok(());
            }
        }
        let key_alias = if key == "loss.alpha" { "mixer.alpha" } else { key };
        if self.train.apply(key_alias, raw)? {
            return Ok(());
        }
        let e = &mut self.experiment;
        let i = &mut self.inversion;
        match key {
            "experiment.lambdas" => e.lambdas = list(key, raw)?,
            "experiment.eval_pairs" => e.eval_pairs = value(key, raw)?,
            "experiment.eval_seed" => e.eval_seed = value(key, raw)?,
            "experiment.retrieval" => e.retrieval = value(key, raw)?,
            "experiment.jobs" => e.jobs = value(key, raw)?,
            "experiment.window" => {
                e.window = match raw {
                    "default" => None,
                    _ => {
                        let v: Vec<usize> = list(key, raw)?;
                        match v[..] {
                            [lo, hi] => Some((lo, hi)),
                            _ => return Err(Error::Config(format!("{key} needs two steps, got {raw:?}"))),
                        }
                    }
                }
            }
            "experiment.pca_samples" => e.pca_samples = value(key, raw)?,
            "experiment.pca_components" => e.pca_components = value(key, raw)?,
            "experiment.pca_seed" => e.pca_seed = value(key, raw)?,
            "experiment.edit_sigmas" => e.edit_sigmas = value(key, raw)?,
            "experiment.edit_codes" => e.edit_codes = value(key, raw)?,
            "inversion.steps" => i.steps = value(key, raw)?,
            "inversion.learning_rate" => i.learning_rate = value(key, raw)?,
            "inversion.pivotal_steps" => i.pivotal_steps = value(key, raw)?,
            "inversion.pivotal_learning_rate" => i.pivotal_learning_rate = value(key, raw)?,
            "inversion.tolerance" => i.tolerance = value(key, raw)?,
            "output.dir" => self.output = PathBuf::from(raw),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.inversion.validate()?;
        let e = &self.experiment;
        if e.lambdas.is_empty() {
            return Err(Error::Config("experiment.lambdas is empty".into()));
        }
        if e.eval_pairs == 0 || e.jobs == 0 || e.retrieval < 2 || e.edit_codes == 0 {
            return Err(Error::Config(
                "eval_pairs, jobs and edit_codes must be positive and retrieval at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            eval_pairs: self.experiment.eval_pairs,
            eval_seed: self.experiment.eval_seed,
            jobs: self.experiment.jobs,
        }
    }

    /// Every setting as dotted pairs; parsing them back yields `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("world.seed".to_string(), self.world_seed.to_string())];
        out.extend(self.world.to_pairs().into_iter().map(|(k, v)| (format!("world.{k}"), v)));
        let mut train = self.train.to_pairs();
        // Keep sections contiguous so the rendered file has one header each.
        train.sort_by_key(|(k, _)| ["train.", "loss.", "mixer.", "optim."].iter().position(|p| k.starts_with(p)));
        out.extend(train);
        let e = &self.experiment;
        let window = e.window.map_or("default".to_string(), |(a, b)| format!("{a}, {b}"));
        for (k, v) in [
            ("lambdas", fmt_list(&e.lambdas)),
            ("eval_pairs", e.eval_pairs.to_string()),
            ("eval_seed", e.eval_seed.to_string()),
            ("retrieval", e.retrieval.to_string()),
            ("jobs", e.jobs.to_string()),
            ("window", window),
            ("pca_samples", e.pca_samples.to_string()),
            ("pca_components", e.pca_components.to_string()),
            ("pca_seed", e.pca_seed.to_string()),
            ("edit_sigmas", format!("{:?}", e.edit_sigmas)),
            ("edit_codes", e.edit_codes.to_string()),
        ] {
            out.push((format!("experiment.{k}"), v));
        }
        let i = &self.inversion;
        for (k, v) in [
            ("steps", i.steps.to_string()),
            ("learning_rate", format!("{:?}", i.learning_rate)),
            ("pivotal_steps", i.pivotal_steps.to_string()),
            ("pivotal_learning_rate", format!("{:?}", i.pivotal_learning_rate)),
            ("tolerance", format!("{:?}", i.tolerance)),
        ] {
            out.push((format!("inversion.{k}"), v));
        }
        out.push(("output.dir".into(), self.output.display().to_string()));
        out
    }

    /// Manifest text: header comments, the resolved settings, and the
    /// source config echoed verbatim as comments.
    pub fn manifest(&self, header: &[String], source: Option<&str>) -> String {
        let mut text = settings::render(header, &self.to_pairs());
        if let Some(src) = source {
            text.push_str("\n# source config, verbatim:\n");
            for line in src.lines() {
                text.push_str("#| ");
                text.push_str(line);
                text.push('\n');
            }
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip_through_text() {
        let mut c = RunConfig::default();
        c.set("loss.lambda", "10").unwrap();
        c.set("experiment.window", "20, 80").unwrap();
        c.set("experiment.lambdas", "0, 1e-2, 5").unwrap();
        c.set("loss.alpha", "0.5").unwrap();
        c.set("world.seed", "7").unwrap();
        let text = c.manifest(&["header".into()], Some("[loss]\nlambda = 10\n"));
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&settings::render(&[], &RunConfig::default().to_pairs())).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        for bad in ["[train]\nstepz = 3\n", "[world]\nseed = -1\n", "[experiment]\nwindow = 3\n", "bogus = 1\n"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn default_grid_is_the_standard_sweep() {
        assert_eq!(RunConfig::default().experiment.lambdas, vec![0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]);
    }
}
