// SPDX-License-Identifier: Apache-2.0

//! Image to latent by optimization, pivotal tuning of a generator copy, and
//! the end-to-end image swap built on both.

use std::time::Instant;

use crate::diff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, Space};
use crate::mixer::MixerStack;
use crate::optim::{AdamW, AdamWConfig};
use crate::world::{FrozenWorld, GeneratorParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub pivotal_steps: usize,
    pub pivotal_learning_rate: f64,
    /// Reconstruction MSE regarded as a successful inversion.
    pub tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-2,
            pivotal_steps: 200,
            pivotal_learning_rate: 1e-3,
            tolerance: 1e-3,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inversion steps must be at least 1".into()));
        }
        for lr in [self.learning_rate, self.pivotal_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("invalid inversion learning rate {lr}")));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("invalid tolerance {}", self.tolerance)));
        }
        Ok(())
    }

    fn optimizer(lr: f64) -> AdamWConfig {
        // No decay: it would pull codes and weights toward zero.
        AdamWConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// Best code seen, tagged `W`.
    pub w: LatentCode,
    pub mse: f64,
    /// Best MSE after each step (non-increasing). Entry 0 is the start.
    pub best_history: Vec<f64>,
}

impl Inversion {
    pub fn converged(&self, cfg: &InversionConfig) -> bool {
        self.mse < cfg.tolerance
    }
}

fn mse_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn check_image(world: &FrozenWorld, img: &Image) -> Result<()> {
    let r = world.config().resolution;
    if img.data().shape() != [3, r, r] {
        return Err(Error::dim(
            "invert",
            format!("image shape {:?}, world expects [3, {r}, {r}]", img.data().shape()),
        ));
    }
    Ok(())
}

/// Reconstruction MSE of `generate(broadcast(w))` against `image` under the
/// given generator parameters.
pub fn reconstruction_mse(world: &FrozenWorld, params: &GeneratorParams<Array>, w: &LatentCode, image: &Image) -> Result<f64> {
    let img = world.generate_using(params, &world.broadcast_w(w)?)?;
    img.mse(image)
}

/// Adam descent on a `W` code from `map(0)`. Returns the best code seen.
pub fn invert(world: &FrozenWorld, image: &Image, cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    check_image(world, image)?;
    let d = world.config().latent_dim;
    let mut w = world.map_z_to_w(&LatentCode::z(vec![0.0; d])?)?.into_data();
    let mut opt = AdamW::new(InversionConfig::optimizer(cfg.learning_rate), &[&w]);
    let mut best = (f64::INFINITY, w.clone());
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let plus = world.broadcast_on(&mut tape, wv)?;
        let img = world.generate_on(&mut tape, plus)?;
        let target = tape.constant(image.data().clone());
        let loss = mse_on(&mut tape, img, target)?;
        let value = tape.value(loss).item();
        if value < best.0 {
            best = (value, w.clone());
        }
        history.push(best.0);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(loss)?;
        let g = grads.get(wv).map(|a| a.data().to_vec()).unwrap_or_else(|| vec![0.0; d]);
        w = opt.step(&[&w], &[g])?.remove(0);
    }
    Ok(Inversion {
        w: LatentCode::new(Space::W, best.1)?,
        mse: best.0,
        best_history: history,
    })
}

/// Result of tuning a generator copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedGenerator {
    pub params: GeneratorParams<Array>,
    /// Mean pivot MSE with the original weights.
    pub mse_before: f64,
    /// Mean pivot MSE with the returned weights.
    pub mse_after: f64,
}

fn flatten(p: &GeneratorParams<Array>) -> Vec<Array> {
    p.entries().into_iter().map(|(_, a)| a.clone()).collect()
}

fn unflatten(template: &GeneratorParams<Array>, values: Vec<Array>) -> Result<GeneratorParams<Array>> {
    let mut it = values.into_iter();
    template.try_map(|name, _| it.next().ok_or_else(|| Error::Contract(format!("missing value for {name}"))))
}

/// Fine-tunes a copy of the generator so each `(w, image)` pivot is
/// reconstructed better. The world is never modified; the best weights seen
/// (the originals included) are returned.
pub fn pivotal_tune(world: &FrozenWorld, pivots: &[(&LatentCode, &Image)], cfg: &InversionConfig) -> Result<TunedGenerator> {
    cfg.validate()?;
    if pivots.is_empty() {
        return Err(Error::Contract("pivotal tuning needs at least one pivot".into()));
    }
    for (w, img) in pivots {
        w.expect_space(Space::W)?;
        check_image(world, img)?;
    }
    let mut current = world.generator.clone();
    let mut opt = AdamW::new(
        InversionConfig::optimizer(cfg.pivotal_learning_rate),
        &current.entries().into_iter().map(|(_, a)| a).collect::<Vec<_>>(),
    );
    let mut best: Option<(f64, GeneratorParams<Array>)> = None;
    let mut before = f64::NAN;
    for step in 0..=cfg.pivotal_steps {
        let mut tape = Tape::new();
        let bound = current.bind(&mut tape, true);
        let mut terms = Vec::with_capacity(pivots.len());
        for (w, img) in pivots {
            let wv = tape.constant(w.data().clone());
            let plus = world.broadcast_on(&mut tape, wv)?;
            let out = world.generate_with(&mut tape, &bound, plus)?;
            let target = tape.constant(img.data().clone());
            terms.push(mse_on(&mut tape, out, target)?);
        }
        let stacked = tape.stack(&terms)?;
        let loss = tape.mean(stacked)?;
        let value = tape.value(loss).item();
        if step == 0 {
            before = value;
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, current.clone()));
        }
        if step == cfg.pivotal_steps {
            break;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<f64>> = bound
            .entries()
            .into_iter()
            .map(|(_, v)| match grads.get(*v) {
                Some(a) => a.data().to_vec(),
                None => vec![0.0; tape.value(*v).len()],
            })
            .collect();
        let flat = flatten(&current);
        let next = opt.step(&flat.iter().collect::<Vec<_>>(), &g)?;
        current = unflatten(&current, next)?;
    }
    let (after, params) = best.expect("at least one evaluation");
    Ok(TunedGenerator {
        params,
        mse_before: before,
        mse_after: after,
    })
}

/// Output of the image-to-image swap with stage timings.
#[derive(Debug, Clone)]
pub struct SwapOutput {
    pub image: Image,
    pub source: Inversion,
    pub target: Inversion,
    pub tuned: TunedGenerator,
    pub invert_ms: f64,
    pub tune_ms: f64,
    pub mix_ms: f64,
    pub generate_ms: f64,
}

/// Inverts both images to `W`, tunes a generator copy on the two pivots,
/// mixes the codes and generates the swap with the tuned copy.
pub fn swap_images(world: &FrozenWorld, stack: &MixerStack, source: &Image, target: &Image, cfg: &InversionConfig) -> Result<SwapOutput> {
    let space = stack.config().space;
    if space == Space::Z {
        return Err(Error::Space {
            expected: Space::W,
            found: Space::Z,
        });
    }
    let t0 = Instant::now();
    let inv_s = invert(world, source, cfg)?;
    let inv_t = invert(world, target, cfg)?;
    let invert_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let tuned = pivotal_tune(world, &[(&inv_s.w, source), (&inv_t.w, target)], cfg)?;
    let tune_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let lift = |w: &LatentCode| match space {
        Space::WPlus => world.broadcast_w(w),
        _ => Ok(w.clone()),
    };
    let swap = stack.mix(&lift(&inv_s.w)?, &lift(&inv_t.w)?)?;
    let mix_ms = t2.elapsed().as_secs_f64() * 1e3;

    let t3 = Instant::now();
    let code = match space {
        Space::WPlus => swap,
        _ => world.broadcast_w(&swap)?,
    };
    let image = world.generate_using(&tuned.params, &code)?;
    let generate_ms = t3.elapsed().as_secs_f64() * 1e3;

    Ok(SwapOutput {
        image,
        source: inv_s,
        target: inv_t,
        tuned,
        invert_ms,
        tune_ms,
        mix_ms,
        generate_ms,
    })
}
