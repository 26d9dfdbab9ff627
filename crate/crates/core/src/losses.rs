// SPDX-License-Identifier: Apache-2.0

//! Identity, latent-penalty and shape losses and their weighted sum
//! `L = L_id + λ·L_lp + μ·L_s`.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::world::{Embedder, FrozenWorld};

/// Floor on embedding norms before the cosine.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Latent-penalty weight.
    pub lambda: f64,
    /// Shape weight.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 100.0, mu: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (lambda={}, mu={})",
                self.lambda, self.mu
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub id_loss: f64,
    pub lp_loss: f64,
    pub shape_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(weights: LossWeights, id_loss: f64, lp_loss: f64, shape_loss: f64) -> Self {
        Self {
            id_loss,
            lp_loss,
            shape_loss,
            total: id_loss + weights.lambda * lp_loss + weights.mu * shape_loss,
        }
    }

    /// Elementwise mean of several breakdowns (totals averaged, not
    /// recomputed).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            id_loss: sum(|b| b.id_loss),
            lp_loss: sum(|b| b.lp_loss),
            shape_loss: sum(|b| b.shape_loss),
            total: sum(|b| b.total),
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.id_loss, self.lp_loss, self.shape_loss, self.total].iter().all(|v| v.is_finite())
    }
}

/// `1 − cos(a, b)` of two embeddings.
pub fn cosine_loss_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.normalize(a, COSINE_FLOOR)?;
    let nb = tape.normalize(b, COSINE_FLOOR)?;
    let c = tape.dot(na, nb)?;
    tape.affine(c, -1.0, 1.0)
}

pub fn id_loss_on(tape: &mut Tape, world: &FrozenWorld, which: Embedder, img_s: Var, img_swap: Var) -> Result<Var> {
    let es = world.embed_on(tape, img_s, which)?;
    let ew = world.embed_on(tape, img_swap, which)?;
    cosine_loss_on(tape, es, ew)
}

/// Mean squared difference over every element of the two codes.
pub fn latent_penalty_on(tape: &mut Tape, t: Var, swap: Var) -> Result<Var> {
    if tape.shape(t) != tape.shape(swap) {
        return Err(Error::dim(
            "latent_penalty",
            format!("{:?} vs {:?}", tape.shape(t), tape.shape(swap)),
        ));
    }
    let d = tape.sub(t, swap)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Landmarks of source identity with target expression and pose.
pub fn fused_landmarks_on(tape: &mut Tape, world: &FrozenWorld, img_s: Var, img_t: Var) -> Result<Var> {
    let cfg = world.config();
    let cs = world.coeffs_on(tape, img_s)?;
    let ct = world.coeffs_on(tape, img_t)?;
    let id = tape.slice(cs, 0, cfg.id_coeffs)?;
    let rest = tape.slice(ct, cfg.id_coeffs, cfg.coeff_width())?;
    let fused = tape.concat(&[id, rest])?;
    world.landmarks_on(tape, fused)
}

/// L1 sum between landmarks of the swap and the fused landmarks.
pub fn shape_loss_on(tape: &mut Tape, world: &FrozenWorld, img_s: Var, img_t: Var, img_swap: Var) -> Result<Var> {
    let q_fuse = fused_landmarks_on(tape, world, img_s, img_t)?;
    let c = world.coeffs_on(tape, img_swap)?;
    let q_swap = world.landmarks_on(tape, c)?;
    let d = tape.sub(q_swap, q_fuse)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

pub fn total_on(tape: &mut Tape, weights: LossWeights, id: Var, lp: Var, shape: Var) -> Result<Var> {
    let lp = tape.scale(lp, weights.lambda)?;
    let shape = tape.scale(shape, weights.mu)?;
    let s = tape.add(id, lp)?;
    tape.add(s, shape)
}

/// The three terms and their total as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub id: Var,
    pub lp: Var,
    pub shape: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            id_loss: tape.value(self.id).item(),
            lp_loss: tape.value(self.lp).item(),
            shape_loss: tape.value(self.shape).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Full objective for one pair. `code_t` and `code_swap` are in the mixer's
/// operating space; the images are world outputs.
#[allow(clippy::too_many_arguments)]
pub fn objective_on(
    tape: &mut Tape,
    world: &FrozenWorld,
    weights: LossWeights,
    img_s: Var,
    img_t: Var,
    img_swap: Var,
    code_t: Var,
    code_swap: Var,
) -> Result<LossTerms> {
    let id = id_loss_on(tape, world, Embedder::Train, img_s, img_swap)?;
    let lp = latent_penalty_on(tape, code_t, code_swap)?;
    let shape = shape_loss_on(tape, world, img_s, img_t, img_swap)?;
    let total = total_on(tape, weights, id, lp, shape)?;
    Ok(LossTerms { id, lp, shape, total })
}

// ---- value-level wrappers -------------------------------------------------

pub fn id_loss(world: &FrozenWorld, which: Embedder, img_s: &Image, img_swap: &Image) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.constant(img_s.data().clone());
    let b = t.constant(img_swap.data().clone());
    let l = id_loss_on(&mut t, world, which, a, b)?;
    Ok(t.value(l).item())
}

pub fn latent_penalty(t: &LatentCode, swap: &LatentCode) -> Result<f64> {
    swap.expect_space(t.space())?;
    let mut tape = Tape::new();
    let a = tape.constant(t.data().clone());
    let b = tape.constant(swap.data().clone());
    let l = latent_penalty_on(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn shape_loss(world: &FrozenWorld, img_s: &Image, img_t: &Image, img_swap: &Image) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.constant(img_s.data().clone());
    let tt = t.constant(img_t.data().clone());
    let w = t.constant(img_swap.data().clone());
    let l = shape_loss_on(&mut t, world, s, tt, w)?;
    Ok(t.value(l).item())
}

pub fn total_loss(weights: LossWeights, id_loss: f64, lp_loss: f64, shape_loss: f64) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown::new(weights, id_loss, lp_loss, shape_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Array;

    #[test]
    fn cosine_loss_reference_values() {
        let mut t = Tape::new();
        let a = t.constant(Array::vector(vec![1.0, 0.0, 0.0]));
        let b = t.constant(Array::vector(vec![0.0, 2.0, 0.0]));
        let c = t.constant(Array::vector(vec![-3.0, 0.0, 0.0]));
        let same = cosine_loss_on(&mut t, a, a).unwrap();
        let orth = cosine_loss_on(&mut t, a, b).unwrap();
        let anti = cosine_loss_on(&mut t, a, c).unwrap();
        assert!(t.value(same).item().abs() < 1e-15);
        assert!((t.value(orth).item() - 1.0).abs() < 1e-15);
        assert!((t.value(anti).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn latent_penalty_reference_values() {
        let t = LatentCode::w(vec![0.5; 6]).unwrap();
        assert_eq!(latent_penalty(&t, &t).unwrap(), 0.0);
        let plus1 = LatentCode::w(vec![1.5; 6]).unwrap();
        let plus2 = LatentCode::w(vec![-1.5; 6]).unwrap();
        assert_eq!(latent_penalty(&t, &plus1).unwrap(), 1.0);
        assert_eq!(latent_penalty(&t, &plus2).unwrap(), 4.0);
        let z = LatentCode::z(vec![0.5; 6]).unwrap();
        assert!(matches!(latent_penalty(&t, &z), Err(Error::Space { .. })));
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights { lambda: 100.0, mu: 0.1 };
        let b = total_loss(w, 0.5, 0.01, 1.0).unwrap();
        assert!((b.total - 1.6).abs() < 1e-12);
        let b = total_loss(LossWeights { lambda: 0.0, mu: 0.0 }, 0.7, 3.0, 9.0).unwrap();
        assert_eq!(b.total, 0.7);
        assert_eq!(LossWeights::default(), LossWeights { lambda: 1e2, mu: 0.1 });
        assert!(total_loss(LossWeights { lambda: -1.0, mu: 0.1 }, 0.0, 0.0, 0.0).is_err());
    }
}
