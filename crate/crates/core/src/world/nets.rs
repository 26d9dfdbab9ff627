// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use crate::diff::{Array, Tape, Var};
use crate::error::Result;
use crate::rng::normal_f32_vec;

/// Affine layer `y = W·x + b` with frozen parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array,
    /// `(out,)`
    pub bias: Array,
}

impl Dense {
    pub(crate) fn random(rng: &mut impl Rng, out: usize, inp: usize, gain: f64, bias_std: f64) -> Result<Self> {
        Ok(Self {
            weight: Array::new([out, inp], normal_f32_vec(rng, out * inp, gain / (inp as f64).sqrt()))?,
            bias: Array::new([out], normal_f32_vec(rng, out, bias_std))?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let y = tape.matmul(w, x)?;
        tape.add(y, b)
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str) -> [(String, &'a Array); 2] {
        [
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub(crate) fn load(prefix: &str, lookup: &mut impl FnMut(&str) -> Result<Array>) -> Result<Self> {
        Ok(Self {
            weight: lookup(&format!("{prefix}.weight"))?,
            bias: lookup(&format!("{prefix}.bias"))?,
        })
    }

    /// Plain evaluation without a tape.
    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let w = self.weight.data();
        (0..o)
            .map(|r| {
                w[r * i..(r + 1) * i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias.data()[r]
            })
            .collect()
    }
}

/// Eight swish-activated affine layers from Z to W.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNet {
    pub layers: Vec<Dense>,
}

pub(crate) const MAPPING_DEPTH: usize = 8;
/// Units of W: every mapped code is multiplied by this after the last layer.
pub(crate) const W_SCALE: f64 = 0.035;

impl MappingNet {
    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut h = z;
        for l in &self.layers {
            let a = l.forward(tape, h)?;
            h = tape.swish(a)?;
        }
        tape.scale(h, W_SCALE)
    }
}

/// Fixed image analysis shared by the embedders and the coefficient
/// extractor: standardized 4x4 means (`low`), the 8x8 band-pass residual
/// (`band`), and a projection of the band onto identity features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontEnd {
    pub low_mean: Array,
    pub low_inv_std: Array,
    pub band_mean: Array,
    pub band_inv_std: Array,
    /// `(IDENTITY_FEATURES, band width)`
    pub id_proj: Array,
}

pub(crate) const IDENTITY_FEATURES: usize = 32;
pub(crate) const EMBED_HIDDEN: usize = 128;

/// Raw (unstandardized) pooled features: `(low, band)`, flattened.
pub(crate) fn pooled(tape: &mut Tape, img: Var, resolution: usize) -> Result<(Var, Var)> {
    let p4 = tape.avg_pool(img, resolution / 4)?;
    let p8 = tape.avg_pool(img, resolution / 8)?;
    let up = tape.upsample2x(p4)?;
    let band = tape.sub(p8, up)?;
    let low = tape.reshape(p4, &[48])?;
    let band = tape.reshape(band, &[192])?;
    Ok((low, band))
}

pub(crate) struct Features {
    pub low: Var,
    pub band: Var,
    pub identity: Var,
}

impl FrontEnd {
    pub(crate) fn forward(&self, tape: &mut Tape, img: Var, resolution: usize) -> Result<Features> {
        let (low, band) = pooled(tape, img, resolution)?;
        let standardize = |tape: &mut Tape, x: Var, mean: &Array, inv: &Array| -> Result<Var> {
            let m = tape.constant(mean.clone());
            let s = tape.constant(inv.clone());
            let c = tape.sub(x, m)?;
            tape.mul(c, s)
        };
        let low = standardize(tape, low, &self.low_mean, &self.low_inv_std)?;
        let band = standardize(tape, band, &self.band_mean, &self.band_inv_std)?;
        let p = tape.constant(self.id_proj.clone());
        let identity = tape.matmul(p, band)?;
        Ok(Features { low, band, identity })
    }
}

/// Smooth identity embedder over the shared identity features; output is
/// unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedder {
    pub hidden: Dense,
    /// Bias holds the centering offset estimated at seeding.
    pub out: Dense,
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

impl IdentityEmbedder {
    pub(crate) fn random(rng: &mut impl Rng, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Dense::random(rng, EMBED_HIDDEN, IDENTITY_FEATURES, 1.5, 0.5)?,
            out: Dense {
                weight: Array::new(
                    [embed_dim, EMBED_HIDDEN],
                    normal_f32_vec(rng, embed_dim * EMBED_HIDDEN, 1.0 / (EMBED_HIDDEN as f64).sqrt()),
                )?,
                bias: Array::zeros([embed_dim]),
            },
        })
    }

    /// Pre-normalization output.
    pub(crate) fn raw(&self, tape: &mut Tape, identity: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, identity)?;
        let h = tape.swish(h)?;
        self.out.forward(tape, h)
    }

    pub(crate) fn forward(&self, tape: &mut Tape, identity: Var) -> Result<Var> {
        let e = self.raw(tape, identity)?;
        tape.normalize(e, NORM_FLOOR)
    }
}

/// Image features to id ‖ expression ‖ pose coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffExtractor {
    /// From the identity features.
    pub id: Dense,
    /// From the band features.
    pub expr: Dense,
    /// From the low-frequency features.
    pub pose: Dense,
}

impl CoeffExtractor {
    pub(crate) fn forward(&self, tape: &mut Tape, f: &Features) -> Result<Var> {
        let id = self.id.forward(tape, f.identity)?;
        let ex = self.expr.forward(tape, f.band)?;
        let po = self.pose.forward(tape, f.low)?;
        tape.concat(&[id, ex, po])
    }
}

/// Coefficients to `(K, 2)` landmark coordinates:
/// `q = mean + B·c + N·swish(H·c + h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkDecoder {
    pub mean: Array,
    pub basis: Array,
    pub hidden: Dense,
    pub nonlinear: Array,
}

pub(crate) const LANDMARK_BASIS_STD: f64 = 0.01;
pub(crate) const LANDMARK_HIDDEN: usize = 16;

impl LandmarkDecoder {
    pub(crate) fn random(rng: &mut impl Rng, coeffs: usize, landmarks: usize) -> Result<Self> {
        let n = 2 * landmarks;
        Ok(Self {
            mean: Array::new([n], normal_f32_vec(rng, n, 0.5))?,
            basis: Array::new([n, coeffs], normal_f32_vec(rng, n * coeffs, LANDMARK_BASIS_STD))?,
            hidden: Dense::random(rng, LANDMARK_HIDDEN, coeffs, 1.0, 0.3)?,
            nonlinear: Array::new(
                [n, LANDMARK_HIDDEN],
                normal_f32_vec(rng, n * LANDMARK_HIDDEN, 0.3 * LANDMARK_BASIS_STD),
            )?,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        let landmarks = self.mean.len() / 2;
        let mean = tape.constant(self.mean.clone());
        let basis = tape.constant(self.basis.clone());
        let lin = tape.matmul(basis, coeffs)?;
        let h = self.hidden.forward(tape, coeffs)?;
        let h = tape.swish(h)?;
        let nl = tape.constant(self.nonlinear.clone());
        let nl = tape.matmul(nl, h)?;
        let q = tape.add(mean, lin)?;
        let q = tape.add(q, nl)?;
        tape.reshape(q, &[landmarks, 2])
    }
}
