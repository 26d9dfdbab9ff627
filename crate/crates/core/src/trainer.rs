// SPDX-License-Identifier: Apache-2.0

//! Random-latent training of the mixer against the frozen world.
//!
//! Each step samples a batch of `(source, target)` latent pairs, mixes them,
//! generates source, target and swapped images, and takes one optimizer step
//! on the mean batch objective. Only mixer parameters are bound as trainable
//! leaves, so the world cannot change.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::diff::{Tape, Var};
use crate::error::{AbortReport, Error, Result};
use crate::latent::{LatentCode, Space};
use crate::losses::{objective_on, LossBreakdown, LossTerms, LossWeights};
use crate::mixer::{BoundStack, MixerConfig, MixerStack};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{normal_vec, stream, StreamRng};
use crate::settings;
use crate::world::FrozenWorld;

pub const METRICS_HEADER: &str = "step,id_loss,lp_loss,shape_loss,total,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub same_pair_probability: f64,
    pub optim: AdamWConfig,
    pub steps: usize,
    pub weights: LossWeights,
    pub space: Space,
    /// Residual coefficient of the mixer.
    pub alpha: f64,
    pub fc_depth: usize,
    pub seed: u64,
    pub log_window: usize,
    /// Stop once the windowed total changes by less than `1e-4` (relative)
    /// across four windows.
    pub early_stop: bool,
    /// Checkpoint interval in steps; `0` disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Worker threads for per-pair passes. Gradients are always reduced in
    /// pair order, so the result does not depend on this.
    pub jobs: usize,
    /// Record elapsed wall time in the metrics; when off the column is 0 and
    /// the CSV is a pure function of the config.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            same_pair_probability: 1.0 / 8.0,
            optim: AdamWConfig::default(),
            steps: 5000,
            weights: LossWeights::default(),
            space: Space::WPlus,
            alpha: 1.0,
            fc_depth: 5,
            seed: 0,
            log_window: 250,
            early_stop: true,
            checkpoint_every: 0,
            jobs: 1,
            wall_clock: true,
        }
    }
}

pub(crate) const EARLY_STOP_TOL: f64 = 1e-4;
pub(crate) const EARLY_STOP_WINDOWS: usize = 4;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.same_pair_probability) {
            return fail(format!(
                "same_pair_probability must lie in [0, 1], got {}",
                self.same_pair_probability
            ));
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.log_window == 0 {
            return fail("log_window must be positive".into());
        }
        if self.jobs == 0 {
            return fail("jobs must be at least 1".into());
        }
        self.optim.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    pub fn mixer_config(&self, world: &FrozenWorld) -> MixerConfig {
        let c = world.config();
        MixerConfig {
            fc_depth: self.fc_depth,
            ..MixerConfig::new(self.space, c.latent_dim, c.layers).with_alpha(self.alpha)
        }
    }

    /// Dotted `section.key` pairs, in the order used by manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("train.seed".into(), self.seed.to_string()),
            ("train.steps".into(), self.steps.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.same_pair_probability".into(), format!("{:?}", self.same_pair_probability)),
            ("train.log_window".into(), self.log_window.to_string()),
            ("train.early_stop".into(), self.early_stop.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("train.jobs".into(), self.jobs.to_string()),
            ("train.wall_clock".into(), self.wall_clock.to_string()),
            ("loss.lambda".into(), format!("{:?}", self.weights.lambda)),
            ("loss.mu".into(), format!("{:?}", self.weights.mu)),
            ("mixer.space".into(), self.space.to_string()),
            ("mixer.alpha".into(), format!("{:?}", self.alpha)),
            ("mixer.fc_depth".into(), self.fc_depth.to_string()),
        ];
        out.extend(self.optim.to_pairs());
        out
    }

    /// Applies one dotted key. Returns `Ok(false)` for keys outside the
    /// training sections so callers can reject unknown keys.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        use settings::{boolean, value};
        match key {
            "train.seed" => self.seed = value(key, raw)?,
            "train.steps" => self.steps = value(key, raw)?,
            "train.batch_size" => self.batch_size = value(key, raw)?,
            "train.same_pair_probability" => self.same_pair_probability = value(key, raw)?,
            "train.log_window" => self.log_window = value(key, raw)?,
            "train.early_stop" => self.early_stop = boolean(key, raw)?,
            "train.checkpoint_every" => self.checkpoint_every = value(key, raw)?,
            "train.jobs" => self.jobs = value(key, raw)?,
            "train.wall_clock" => self.wall_clock = boolean(key, raw)?,
            "loss.lambda" => self.weights.lambda = value(key, raw)?,
            "loss.mu" => self.weights.mu = value(key, raw)?,
            "mixer.space" => self.space = raw.parse()?,
            "mixer.alpha" => self.alpha = value(key, raw)?,
            "mixer.fc_depth" => self.fc_depth = value(key, raw)?,
            "optim.learning_rate" => self.optim.learning_rate = value(key, raw)?,
            "optim.beta1" => self.optim.beta1 = value(key, raw)?,
            "optim.beta2" => self.optim.beta2 = value(key, raw)?,
            "optim.eps" => self.optim.eps = value(key, raw)?,
            "optim.weight_decay" => self.optim.weight_decay = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Draws one batch of pairs in the configured space. Each pair is identical
/// with probability `same_pair_probability`, decided independently.
pub fn sample_batch(world: &FrozenWorld, config: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<(LatentCode, LatentCode)>> {
    let d = world.config().latent_dim;
    let mut out = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let zs = normal_vec(rng, d);
        let same = rng.random::<f64>() < config.same_pair_probability;
        let zt = if same { zs.clone() } else { normal_vec(rng, d) };
        let lift = |z: Vec<f64>| -> Result<LatentCode> {
            let z = LatentCode::z(z)?;
            match config.space {
                Space::Z => Ok(z),
                Space::W => world.map_z_to_w(&z),
                Space::WPlus => world.broadcast_w(&world.map_z_to_w(&z)?),
            }
        };
        out.push((lift(zs)?, lift(zt)?));
    }
    Ok(out)
}

/// Lifts a code of `space` on the tape to the `(L, D)` generator input.
pub fn to_wplus_on(world: &FrozenWorld, tape: &mut Tape, code: Var, space: Space) -> Result<Var> {
    match space {
        Space::Z => {
            let w = world.map_on(tape, code)?;
            world.broadcast_on(tape, w)
        }
        Space::W => world.broadcast_on(tape, code),
        Space::WPlus => Ok(code),
    }
}

/// Builds the full objective for one pair on `tape`. Returns the loss terms
/// and the swapped code (in the mixer's space).
pub fn pair_objective_on(
    world: &FrozenWorld,
    tape: &mut Tape,
    stack: &BoundStack,
    weights: LossWeights,
    s: &LatentCode,
    t: &LatentCode,
) -> Result<(LossTerms, Var)> {
    let space = stack.config.space;
    s.expect_space(space)?;
    t.expect_space(space)?;
    let sv = tape.constant(s.data().clone());
    let tv = tape.constant(t.data().clone());
    let swap = stack.mix_on(tape, sv, tv)?;
    let s_plus = to_wplus_on(world, tape, sv, space)?;
    let img_s = world.generate_on(tape, s_plus)?;
    let img_t = if s.data().bitwise_eq(t.data()) {
        img_s
    } else {
        let t_plus = to_wplus_on(world, tape, tv, space)?;
        world.generate_on(tape, t_plus)?
    };
    let swap_plus = to_wplus_on(world, tape, swap, space)?;
    let img_swap = world.generate_on(tape, swap_plus)?;
    let terms = objective_on(tape, world, weights, img_s, img_t, img_swap, tv, swap)?;
    Ok((terms, swap))
}

/// Loss and parameter gradient (in [`MixerStack::params`] order) of a
/// single pair.
pub fn pair_gradient(
    world: &FrozenWorld,
    stack: &MixerStack,
    weights: LossWeights,
    s: &LatentCode,
    t: &LatentCode,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = stack.bind(&mut tape, true);
    let (terms, _) = pair_objective_on(world, &mut tape, &bound, weights, s, t)?;
    let grads = tape.backward(terms.total)?;
    let leaves: Vec<Var> = bound
        .mixers
        .iter()
        .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
        .collect();
    let g = leaves
        .iter()
        .map(|&v| match grads.get(v) {
            Some(a) => a.data().to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect();
    Ok((terms.breakdown(&tape), g))
}

/// Mean loss and mean gradient over a batch. Per-pair work may run on
/// `jobs` threads; the reduction is always in pair order.
pub fn batch_gradient(
    world: &FrozenWorld,
    stack: &MixerStack,
    weights: LossWeights,
    batch: &[(LatentCode, LatentCode)],
    jobs: usize,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let run = |(s, t): &(LatentCode, LatentCode)| pair_gradient(world, stack, weights, s, t);
    let per_pair: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().map(run).collect())
    } else {
        batch.iter().map(run).collect()
    };
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for r in per_pair {
        let (l, g) = r?;
        losses.push(l);
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grad = sum.expect("non-empty batch");
    for a in &mut grad {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    Ok((LossBreakdown::mean(&losses).expect("non-empty batch"), grad))
}

fn abort(step: usize, b: Option<&LossBreakdown>) -> Error {
    let b = b.copied().unwrap_or(LossBreakdown {
        id_loss: f64::NAN,
        lp_loss: f64::NAN,
        shape_loss: f64::NAN,
        total: f64::NAN,
    });
    Error::Abort(AbortReport {
        step,
        id_loss: b.id_loss,
        lp_loss: b.lp_loss,
        shape_loss: b.shape_loss,
        total: b.total,
    })
}

/// One optimizer step on the mean batch objective. A non-finite loss or
/// gradient aborts with the step index and term values.
pub fn train_step(
    world: &FrozenWorld,
    stack: &mut MixerStack,
    opt: &mut AdamW,
    batch: &[(LatentCode, LatentCode)],
    weights: LossWeights,
    jobs: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let (loss, grad) = match batch_gradient(world, stack, weights, batch, jobs) {
        Ok(r) => r,
        Err(Error::NonFinite(_)) => return Err(abort(step, None)),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(abort(step, Some(&loss)));
    }
    let next = match opt.step(&stack.params(), &grad) {
        Ok(p) => p,
        Err(Error::NonFinite(_)) => return Err(abort(step, Some(&loss))),
        Err(e) => return Err(e),
    };
    stack.set_params(next)?;
    Ok(loss)
}

/// Per-step losses with trailing window averages.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub window: usize,
    pub steps: Vec<LossBreakdown>,
    pub wall_ms: Vec<f64>,
    pub checkpoints: Vec<(usize, PathBuf)>,
    /// Step at which the plateau rule ended the run, if it did.
    pub stopped_early: Option<usize>,
}

impl RunLog {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            steps: Vec::new(),
            wall_ms: Vec::new(),
            checkpoints: Vec::new(),
            stopped_early: None,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean over the window ending at 1-based `step` (shorter near the
    /// start).
    pub fn windowed(&self, step: usize) -> Option<LossBreakdown> {
        if step == 0 || step > self.steps.len() {
            return None;
        }
        let lo = step.saturating_sub(self.window);
        LossBreakdown::mean(&self.steps[lo..step])
    }

    pub fn final_window(&self) -> Option<LossBreakdown> {
        self.windowed(self.steps.len())
    }

    /// `(step, windowed)` at every step from `window` on.
    pub fn windowed_series(&self) -> Vec<(usize, LossBreakdown)> {
        (self.window..=self.steps.len())
            .filter_map(|s| self.windowed(s).map(|b| (s, b)))
            .collect()
    }

    /// True once the windowed total has moved by less than the tolerance
    /// over the last four full windows.
    pub fn plateaued(&self) -> bool {
        let n = self.steps.len();
        let span = EARLY_STOP_WINDOWS * self.window;
        if n % self.window != 0 || n < span + self.window {
            return false;
        }
        let (Some(now), Some(then)) = (self.windowed(n), self.windowed(n - span)) else {
            return false;
        };
        (now.total - then.total).abs() <= EARLY_STOP_TOL * then.total.abs().max(f64::MIN_POSITIVE)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for (i, b) in self.steps.iter().enumerate() {
            let ms = self.wall_ms.get(i).copied().unwrap_or(0.0);
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:.3}\n",
                i + 1,
                b.id_loss,
                b.lp_loss,
                b.shape_loss,
                b.total,
                ms
            ));
        }
        s
    }

    /// Windowed series with the same columns minus wall time.
    pub fn windowed_csv(&self) -> String {
        let mut s = String::from("step,id_loss,lp_loss,shape_loss,total\n");
        for (step, b) in self.windowed_series() {
            s.push_str(&format!(
                "{step},{:?},{:?},{:?},{:?}\n",
                b.id_loss, b.lp_loss, b.shape_loss, b.total
            ));
        }
        s
    }

    /// Reads a metrics CSV written by [`RunLog::metrics_csv`].
    pub fn from_metrics_csv(text: &str, window: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(Error::Format("metrics file lacks the expected header".into()));
        }
        let mut log = RunLog::new(window);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("metrics line {}: bad column {i}", n + 2)))
            };
            if f.len() != 6 || num(0)? as usize != log.len() + 1 {
                return Err(Error::Format(format!("metrics line {} is malformed", n + 2)));
            }
            log.steps.push(LossBreakdown {
                id_loss: num(1)?,
                lp_loss: num(2)?,
                shape_loss: num(3)?,
                total: num(4)?,
            });
            log.wall_ms.push(num(5)?);
        }
        Ok(log)
    }
}

/// Checkpoint config entries: optimizer settings and run identity.
pub fn checkpoint_extra(world: &FrozenWorld, config: &TrainConfig, step: usize) -> Vec<(String, String)> {
    let mut extra = config.optim.to_pairs();
    extra.push(("train.seed".into(), config.seed.to_string()));
    extra.push(("train.step".into(), step.to_string()));
    extra.push(("loss.lambda".into(), format!("{:?}", config.weights.lambda)));
    extra.push(("loss.mu".into(), format!("{:?}", config.weights.mu)));
    extra.push(("world.seed".into(), world.seed_value().to_string()));
    extra
}

/// A training run in progress.
pub struct Trainer<'w> {
    world: &'w FrozenWorld,
    config: TrainConfig,
    stack: MixerStack,
    opt: AdamW,
    rng: StreamRng,
    log: RunLog,
    start: Instant,
}

impl<'w> Trainer<'w> {
    pub fn new(world: &'w FrozenWorld, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let stack = MixerStack::init(config.mixer_config(world), config.seed)?;
        let opt = AdamW::new(config.optim, &stack.params());
        Ok(Self {
            world,
            rng: stream(config.seed, "train/batches"),
            log: RunLog::new(config.log_window),
            config,
            stack,
            opt,
            start: Instant::now(),
        })
    }

    pub fn stack(&self) -> &MixerStack {
        &self.stack
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint_extra(&self) -> Vec<(String, String)> {
        checkpoint_extra(self.world, &self.config, self.log.len())
    }

    /// Samples a batch and takes one step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = sample_batch(self.world, &self.config, &mut self.rng)?;
        let step = self.log.len() + 1;
        let loss = train_step(
            self.world,
            &mut self.stack,
            &mut self.opt,
            &batch,
            self.config.weights,
            self.config.jobs,
            step,
        )?;
        self.log.steps.push(loss);
        let ms = if self.config.wall_clock {
            self.start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        self.log.wall_ms.push(ms);
        Ok(loss)
    }

    /// Runs to `config.steps` (or the plateau), writing checkpoints under
    /// `checkpoint_dir` at the configured interval.
    pub fn run(mut self, checkpoint_dir: Option<&Path>) -> Result<(MixerStack, RunLog)> {
        while self.log.len() < self.config.steps {
            self.step()?;
            let n = self.log.len();
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0 && n % self.config.checkpoint_every == 0 {
                    let path = dir.join(format!("step_{n:06}.lsmix"));
                    self.stack.save(&path, &self.checkpoint_extra())?;
                    self.log.checkpoints.push((n, path));
                }
            }
            if self.config.early_stop && self.log.plateaued() {
                self.log.stopped_early = Some(n);
                break;
            }
        }
        Ok((self.stack, self.log))
    }
}

/// Trains a fresh stack without writing anything.
pub fn train(world: &FrozenWorld, config: &TrainConfig) -> Result<(MixerStack, RunLog)> {
    Trainer::new(world, config.clone())?.run(None)
}

/// Manifest text: the config echo plus world identity and code version, in
/// settings format so it can be fed back as a config file.
pub fn manifest(world: &FrozenWorld, config: &TrainConfig, command: &str) -> Result<String> {
    let header = vec![
        format!("latentswap {} run manifest", env!("CARGO_PKG_VERSION")),
        format!("command: {command}"),
        format!("world checksum: {}", world.checksum()?),
    ];
    let mut pairs = vec![("world.seed".to_string(), world.seed_value().to_string())];
    pairs.extend(world.config().to_pairs().into_iter().map(|(k, v)| (format!("world.{k}"), v)));
    pairs.extend(config.to_pairs());
    Ok(settings::render(&header, &pairs))
}

/// Writes `metrics.csv`, `windowed.csv`, `mixer.lsmix` and `manifest.txt`
/// into `dir`.
pub fn write_run(dir: &Path, world: &FrozenWorld, config: &TrainConfig, stack: &MixerStack, log: &RunLog, command: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    stack.save(&dir.join("mixer.lsmix"), &checkpoint_extra(world, config, log.len()))?;
    fs::File::create(dir.join("metrics.csv"))?.write_all(log.metrics_csv().as_bytes())?;
    fs::File::create(dir.join("windowed.csv"))?.write_all(log.windowed_csv().as_bytes())?;
    fs::File::create(dir.join("manifest.txt"))?.write_all(manifest(world, config, command)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(totals: &[f64], window: usize) -> RunLog {
        let mut log = RunLog::new(window);
        for &t in totals {
            log.steps.push(LossBreakdown {
                id_loss: t,
                lp_loss: 0.0,
                shape_loss: 0.0,
                total: t,
            });
            log.wall_ms.push(0.0);
        }
        log
    }

    #[test]
    fn windowed_average_is_trailing() {
        let log = log_of(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
        assert_eq!(log.windowed(1).unwrap().total, 1.0);
        assert_eq!(log.windowed(3).unwrap().total, 2.5);
        assert_eq!(log.final_window().unwrap().total, 4.5);
        assert!(log.windowed(6).is_none());
        assert_eq!(log.windowed_series().len(), 4);
    }

    #[test]
    fn plateau_needs_four_flat_windows() {
        let flat = log_of(&[1.0; 50], 10);
        assert!(flat.plateaued());
        let short = log_of(&[1.0; 40], 10);
        assert!(!short.plateaued());
        let falling: Vec<f64> = (0..50).map(|i| 10.0 - i as f64 * 0.1).collect();
        assert!(!log_of(&falling, 10).plateaued());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let log = log_of(&[0.5, 0.25, 1e-9], 2);
        let text = log.metrics_csv();
        assert!(text.starts_with("step,id_loss,lp_loss,shape_loss,total,wall_ms\n"));
        let back = RunLog::from_metrics_csv(&text, 2).unwrap();
        assert_eq!(back.steps, log.steps);
        assert!(RunLog::from_metrics_csv("nope\n", 2).is_err());
    }

    #[test]
    fn config_keys_round_trip() {
        let cfg = TrainConfig {
            steps: 17,
            space: Space::W,
            weights: LossWeights { lambda: 10.0, mu: 0.2 },
            ..Default::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.apply(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.apply("world.seed", "1").unwrap());
        assert!(back.apply("train.steps", "x").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { same_pair_probability: 1.5, ..Default::default() },
            TrainConfig { steps: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
