// SPDX-License-Identifier: Apache-2.0

//! Layered style generator.
//!
//! Level `k` works at resolution `min(4·2^k, R)` and owns style layers `2k`
//! and `2k+1`. Each style layer is a modulated 1x1 channel mix:
//!
//! ```text
//! s = A·w_ℓ + b                       (per-layer affine of the style vector)
//! M = W·diag(s), rows scaled to unit norm
//! x = swish(g·M·x + P)                 (P: fixed per-pixel pattern)
//! ```
//!
//! Every level adds its own RGB projection to an image that is upsampled
//! alongside the features, so layer `ℓ` shapes detail at level `⌊ℓ/2⌋` and
//! everything after it.

use rand::Rng;

use crate::diff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal_f32_vec;

use super::WorldConfig;

/// Channel widths for the nine levels of an 18-layer generator; other depths
/// sample this schedule proportionally.
const CHANNELS: [usize; 9] = [16, 16, 16, 8, 8, 4, 4, 4, 4];
/// Weight of each level's RGB contribution.
const RGB_GAIN: [f64; 9] = [0.5, 0.5, 0.45, 0.4, 0.2, 0.125, 0.075, 0.05, 0.03];
/// Target standard deviation of the style modulation around 1.
pub(crate) const STYLE_GAIN: [f64; 9] = [0.2, 0.2, 0.24, 0.24, 0.2, 0.2, 0.16, 0.16, 0.16];
/// Gain applied after row normalization of the modulated weight.
const WEIGHT_GAIN: f64 = 1.6;
const DEMOD_EPS: f64 = 1e-8;
const PATTERN_STD: f64 = 0.3;

fn schedule<T: Copy>(table: &[T; 9], k: usize, levels: usize) -> T {
    table[(k * 9 / levels).min(8)]
}

pub(crate) fn level_channels(cfg: &WorldConfig, k: usize) -> usize {
    schedule(&CHANNELS, k, cfg.levels())
}

pub(crate) fn level_style_gain(cfg: &WorldConfig, k: usize) -> f64 {
    schedule(&STYLE_GAIN, k, cfg.levels())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLayer<T> {
    /// `(c_in, D)`
    pub affine: T,
    /// `(c_in,)`
    pub affine_bias: T,
    /// `(c_out, c_in)`
    pub weight: T,
    /// `(c_out, P)`
    pub pattern: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level<T> {
    pub layers: Vec<StyleLayer<T>>,
    /// `(3, c_out)`
    pub to_rgb: T,
}

/// Parameter tree of the generator, generic over storage (`Array`) and
/// tape handles (`Var`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    /// `(c_0, 4, 4)` constant input.
    pub input: T,
    pub levels: Vec<Level<T>>,
}

impl<T> GeneratorParams<T> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<GeneratorParams<U>> {
        let input = f("gen.input", &self.input)?;
        let mut levels = Vec::with_capacity(self.levels.len());
        for (k, lv) in self.levels.iter().enumerate() {
            let mut layers = Vec::with_capacity(lv.layers.len());
            for (j, l) in lv.layers.iter().enumerate() {
                let p = format!("gen.l{k}.s{j}");
                layers.push(StyleLayer {
                    affine: f(&format!("{p}.affine"), &l.affine)?,
                    affine_bias: f(&format!("{p}.affine_bias"), &l.affine_bias)?,
                    weight: f(&format!("{p}.weight"), &l.weight)?,
                    pattern: f(&format!("{p}.pattern"), &l.pattern)?,
                });
            }
            levels.push(Level {
                layers,
                to_rgb: f(&format!("gen.l{k}.to_rgb"), &lv.to_rgb)?,
            });
        }
        Ok(GeneratorParams { input, levels })
    }

    /// Every leaf with its name, in a fixed order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let _ = self.try_map(|name, _| Ok(out.push(name.to_string())));
        let mut refs: Vec<&T> = vec![&self.input];
        for lv in &self.levels {
            for l in &lv.layers {
                refs.extend([&l.affine, &l.affine_bias, &l.weight, &l.pattern]);
            }
            refs.push(&lv.to_rgb);
        }
        out.into_iter().zip(refs).collect()
    }
}

/// Shapes of every generator parameter for a configuration.
pub(crate) fn shapes(cfg: &WorldConfig) -> GeneratorParams<Vec<usize>> {
    let d = cfg.latent_dim;
    let mut c_prev = level_channels(cfg, 0);
    let mut levels = Vec::new();
    for k in 0..cfg.levels() {
        let c = level_channels(cfg, k);
        let r = cfg.level_resolution(k);
        let mut layers = Vec::new();
        for j in 0..2 {
            let c_in = if j == 0 { c_prev } else { c };
            layers.push(StyleLayer {
                affine: vec![c_in, d],
                affine_bias: vec![c_in],
                weight: vec![c, c_in],
                pattern: vec![c, r * r],
            });
        }
        levels.push(Level {
            layers,
            to_rgb: vec![3, c],
        });
        c_prev = c;
    }
    GeneratorParams {
        input: vec![level_channels(cfg, 0), 4, 4],
        levels,
    }
}

/// Random generator before style calibration: the affines are raw unit-scale
/// projections and the biases are one.
pub(crate) fn seed_raw(cfg: &WorldConfig, rng: &mut impl Rng) -> Result<GeneratorParams<Array>> {
    let shapes = shapes(cfg);
    let levels = cfg.levels();
    shapes.try_map(|name, shape| {
        let n: usize = shape.iter().product();
        let data = if name == "gen.input" {
            normal_f32_vec(rng, n, 1.0)
        } else if name.ends_with(".affine") {
            normal_f32_vec(rng, n, 1.0 / (shape[1] as f64).sqrt())
        } else if name.ends_with(".affine_bias") {
            vec![1.0; n]
        } else if name.ends_with(".weight") {
            normal_f32_vec(rng, n, 1.0 / (shape[1] as f64).sqrt())
        } else if name.ends_with(".pattern") {
            normal_f32_vec(rng, n, PATTERN_STD)
        } else if name.ends_with(".to_rgb") {
            let k: usize = name[5..].split('.').next().unwrap().parse().unwrap();
            let gain = schedule(&RGB_GAIN, k, levels);
            normal_f32_vec(rng, n, gain / (shape[1] as f64).sqrt())
        } else {
            return Err(Error::Contract(format!("unknown generator parameter {name}")));
        };
        Array::new(shape.clone(), data)
    })
}

pub(crate) fn from_lookup(cfg: &WorldConfig, mut lookup: impl FnMut(&str) -> Result<Array>) -> Result<GeneratorParams<Array>> {
    shapes(cfg).try_map(|name, shape| {
        let a = lookup(name)?;
        if a.shape() != shape.as_slice() {
            return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", a.shape())));
        }
        Ok(a)
    })
}

impl GeneratorParams<Array> {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorParams<Var> {
        self.try_map(|_, a| {
            Ok(if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            })
        })
        .expect("binding cannot fail")
    }
}

/// Runs the generator on a `(L, D)` code. Returns a `(3, R, R)` image.
pub(crate) fn forward(tape: &mut Tape, cfg: &WorldConfig, p: &GeneratorParams<Var>, code: Var) -> Result<Var> {
    let expected = [cfg.layers, cfg.latent_dim];
    if tape.shape(code) != expected {
        return Err(Error::dim(
            "generate",
            format!("code shape {:?}, expected {expected:?}", tape.shape(code)),
        ));
    }
    let mut x = p.input;
    let mut img: Option<Var> = None;
    let mut res = 4;
    for (k, level) in p.levels.iter().enumerate() {
        let r = cfg.level_resolution(k);
        if r > res {
            x = tape.upsample2x(x)?;
            img = img.map(|i| tape.upsample2x(i)).transpose()?;
            res = r;
        }
        for (j, layer) in level.layers.iter().enumerate() {
            let w = tape.index(code, 2 * k + j)?;
            let s = tape.matmul(layer.affine, w)?;
            let s = tape.add(s, layer.affine_bias)?;
            let s = tape.diag(s)?;
            let wm = tape.matmul(layer.weight, s)?;
            let c_in = tape.shape(wm)[1];
            let c_out = tape.shape(wm)[0];
            let sq = tape.square(wm)?;
            let ones = tape.constant(Array::filled([c_in], 1.0));
            let row = tape.matmul(sq, ones)?;
            let d = tape.rsqrt(row, DEMOD_EPS)?;
            let d = tape.diag(d)?;
            let wm = tape.matmul(d, wm)?;
            let wm = tape.scale(wm, WEIGHT_GAIN)?;
            let flat = tape.reshape(x, &[c_in, r * r])?;
            let y = tape.matmul(wm, flat)?;
            let y = tape.add(y, layer.pattern)?;
            let y = tape.swish(y)?;
            x = tape.reshape(y, &[c_out, r, r])?;
        }
        let c = tape.shape(x)[0];
        let flat = tape.reshape(x, &[c, r * r])?;
        let rgb = tape.matmul(level.to_rgb, flat)?;
        let rgb = tape.reshape(rgb, &[3, r, r])?;
        img = Some(match img {
            Some(i) => tape.add(i, rgb)?,
            None => rgb,
        });
    }
    Ok(img.expect("at least one level"))
}
