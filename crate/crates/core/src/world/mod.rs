// SPDX-License-Identifier: Apache-2.0

//! Seed-deterministic frozen stand-ins for the pretrained networks: mapping
//! network, layered generator, two identity embedders and the
//! coefficient/landmark pipeline.
//!
//! Seeding draws every network from its own named random stream and then
//! calibrates affine offsets and scales against 512 generated samples (the
//! analog of statistics a pretrained pipeline would have absorbed). All
//! parameters are rounded to `f32`, so a world written to disk and read back
//! is bitwise identical to the seeded one.

mod config;
pub mod generator;
mod nets;

use std::collections::HashMap;
use std::path::Path;

pub use config::WorldConfig;
pub use generator::GeneratorParams;
pub use nets::{CoeffExtractor, Dense, FrontEnd, IdentityEmbedder, LandmarkDecoder, MappingNet};

use crate::container::{self, Container, WORLD_MAGIC};
use crate::diff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, Space};
use crate::rng::{self, normal_vec, round_f32};

const CALIBRATION_SAMPLES: usize = 512;
const MAPPING_GAIN: f64 = 1.7;

/// Which identity embedder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedder {
    /// Used by the identity loss.
    Train,
    /// Independent network used only for evaluation metrics.
    Eval,
}

/// Identity, expression and pose coefficients of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVector {
    pub id: Vec<f64>,
    pub expr: Vec<f64>,
    pub pose: Vec<f64>,
}

impl CoeffVector {
    /// Concatenation `id ‖ expr ‖ pose`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.id.clone();
        v.extend_from_slice(&self.expr);
        v.extend_from_slice(&self.pose);
        v
    }

    pub fn from_slice(cfg: &WorldConfig, v: &[f64]) -> Result<Self> {
        if v.len() != cfg.coeff_width() {
            return Err(Error::dim(
                "coefficients",
                format!("got {} values, world expects {}", v.len(), cfg.coeff_width()),
            ));
        }
        let (a, b) = (cfg.id_coeffs, cfg.id_coeffs + cfg.expr_coeffs);
        Ok(Self {
            id: v[..a].to_vec(),
            expr: v[a..b].to_vec(),
            pose: v[b..].to_vec(),
        })
    }

    /// Source identity with target expression and pose.
    pub fn fuse(source: &CoeffVector, target: &CoeffVector) -> Result<CoeffVector> {
        if source.id.len() != target.id.len()
            || source.expr.len() != target.expr.len()
            || source.pose.len() != target.pose.len()
        {
            return Err(Error::dim("fuse_coeffs", "coefficient widths differ"));
        }
        Ok(CoeffVector {
            id: source.id.clone(),
            expr: target.expr.clone(),
            pose: target.pose.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWorld {
    seed: u64,
    config: WorldConfig,
    pub mapping: MappingNet,
    pub generator: GeneratorParams<Array>,
    pub front: FrontEnd,
    pub embed_train: IdentityEmbedder,
    pub embed_eval: IdentityEmbedder,
    pub coeffs: CoeffExtractor,
    pub landmarks: LandmarkDecoder,
}

fn mean_and_inv_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let inv = var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
    (mean, inv)
}

fn round_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(round_f32).collect()
}

/// Rescales the rows of `layer` so its outputs have zero mean and unit
/// variance over `inputs`.
fn standardize_dense(layer: &mut Dense, inputs: &[Vec<f64>]) -> Result<()> {
    let outs: Vec<Vec<f64>> = inputs.iter().map(|x| layer.apply(x)).collect();
    let (mean, inv) = mean_and_inv_std(&outs);
    let (o, i) = (layer.out_dim(), layer.in_dim());
    let mut w = layer.weight.data().to_vec();
    let mut b = layer.bias.data().to_vec();
    for r in 0..o {
        for c in 0..i {
            w[r * i + c] *= inv[r];
        }
        b[r] = (b[r] - mean[r]) * inv[r];
    }
    layer.weight = Array::new([o, i], round_all(w))?;
    layer.bias = Array::new([o], round_all(b))?;
    Ok(())
}

impl FrozenWorld {
    /// Builds the world for `(seed, config)`; a pure function of both.
    pub fn seed(seed: u64, config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;

        let mut r = rng::stream(seed, "world/mapping");
        let mapping = MappingNet {
            layers: (0..nets::MAPPING_DEPTH)
                .map(|_| Dense::random(&mut r, d, d, MAPPING_GAIN, 0.1))
                .collect::<Result<_>>()?,
        };

        let mut cal_rng = rng::stream(seed, "world/calibration");
        let zs: Vec<Vec<f64>> = (0..CALIBRATION_SAMPLES).map(|_| normal_vec(&mut cal_rng, d)).collect();

        let mut world = Self {
            seed,
            config,
            mapping,
            generator: generator::seed_raw(&config, &mut rng::stream(seed, "world/generator"))?,
            front: FrontEnd {
                low_mean: Array::zeros([48]),
                low_inv_std: Array::filled([48], 1.0),
                band_mean: Array::zeros([192]),
                band_inv_std: Array::filled([192], 1.0),
                id_proj: Array::new(
                    [nets::IDENTITY_FEATURES, 192],
                    rng::normal_f32_vec(
                        &mut rng::stream(seed, "world/front"),
                        nets::IDENTITY_FEATURES * 192,
                        1.0 / (192f64).sqrt(),
                    ),
                )?,
            },
            embed_train: IdentityEmbedder::random(&mut rng::stream(seed, "world/embed/train"), config.embed_dim)?,
            embed_eval: IdentityEmbedder::random(&mut rng::stream(seed, "world/embed/eval"), config.embed_dim)?,
            coeffs: {
                let mut r = rng::stream(seed, "world/coeffs");
                CoeffExtractor {
                    id: Dense::random(&mut r, config.id_coeffs, nets::IDENTITY_FEATURES, 1.0, 0.0)?,
                    expr: Dense::random(&mut r, config.expr_coeffs, 192, 1.0, 0.0)?,
                    pose: Dense::random(&mut r, config.pose_coeffs, 48, 1.0, 0.0)?,
                }
            },
            landmarks: LandmarkDecoder::random(
                &mut rng::stream(seed, "world/landmarks"),
                config.coeff_width(),
                config.landmarks,
            )?,
        };

        // Style affines: modulation ~ 1 ± gain around the average W.
        let ws: Vec<Vec<f64>> = zs
            .iter()
            .map(|z| world.map_raw(z))
            .collect::<Result<_>>()?;
        let (w_avg, w_inv) = mean_and_inv_std(&ws);
        let w_std = (w_inv.iter().map(|i| 1.0 / (i * i)).sum::<f64>() / d as f64).sqrt();
        for (k, level) in world.generator.levels.iter_mut().enumerate() {
            let gain = generator::level_style_gain(&config, k) / w_std;
            for layer in &mut level.layers {
                let [c, _] = [layer.affine.shape()[0], d];
                let a: Vec<f64> = layer.affine.data().iter().map(|v| round_f32(v * gain)).collect();
                let bias: Vec<f64> = (0..c)
                    .map(|i| 1.0 - a[i * d..(i + 1) * d].iter().zip(&w_avg).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                layer.affine = Array::new([c, d], a)?;
                layer.affine_bias = Array::new([c], round_all(bias))?;
            }
        }

        // Front-end standardization over generated images.
        let mut lows = Vec::with_capacity(ws.len());
        let mut bands = Vec::with_capacity(ws.len());
        let mut images = Vec::with_capacity(ws.len());
        for w in &ws {
            let img = world.generate(&LatentCode::w(w.clone())?.broadcast(config.layers)?)?;
            let mut t = Tape::new();
            let v = t.constant(img.data().clone());
            let (low, band) = nets::pooled(&mut t, v, config.resolution)?;
            lows.push(t.value(low).data().to_vec());
            bands.push(t.value(band).data().to_vec());
            images.push(img);
        }
        let (m, s) = mean_and_inv_std(&lows);
        world.front.low_mean = Array::new([48], round_all(m))?;
        world.front.low_inv_std = Array::new([48], round_all(s))?;
        let (m, s) = mean_and_inv_std(&bands);
        world.front.band_mean = Array::new([192], round_all(m))?;
        world.front.band_inv_std = Array::new([192], round_all(s))?;

        // Embedder centering and coefficient standardization.
        let mut ident = Vec::with_capacity(images.len());
        let mut low_f = Vec::with_capacity(images.len());
        let mut band_f = Vec::with_capacity(images.len());
        let mut raw_train = Vec::with_capacity(images.len());
        let mut raw_eval = Vec::with_capacity(images.len());
        for img in &images {
            let mut t = Tape::new();
            let v = t.constant(img.data().clone());
            let f = world.front.forward(&mut t, v, config.resolution)?;
            let et = world.embed_train.raw(&mut t, f.identity)?;
            let ee = world.embed_eval.raw(&mut t, f.identity)?;
            ident.push(t.value(f.identity).data().to_vec());
            low_f.push(t.value(f.low).data().to_vec());
            band_f.push(t.value(f.band).data().to_vec());
            raw_train.push(t.value(et).data().to_vec());
            raw_eval.push(t.value(ee).data().to_vec());
        }
        for (emb, raw) in [(&mut world.embed_train, &raw_train), (&mut world.embed_eval, &raw_eval)] {
            let (mean, _) = mean_and_inv_std(raw);
            emb.out.bias = Array::new([config.embed_dim], round_all(mean.iter().map(|m| -m).collect()))?;
        }
        standardize_dense(&mut world.coeffs.id, &ident)?;
        standardize_dense(&mut world.coeffs.expr, &band_f)?;
        standardize_dense(&mut world.coeffs.pose, &low_f)?;
        Ok(world)
    }

    pub fn seed_value(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    fn map_raw(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let v = t.constant(Array::new([z.len()], z.to_vec())?);
        let w = self.mapping.forward(&mut t, v)?;
        Ok(t.value(w).data().to_vec())
    }

    // ---- tape-level operations -------------------------------------------

    pub fn map_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.shape(z) != [self.config.latent_dim] {
            return Err(Error::dim("map_z_to_w", format!("z has shape {:?}", tape.shape(z))));
        }
        self.mapping.forward(tape, z)
    }

    /// `(D,)` to `(L, D)` with identical rows.
    pub fn broadcast_on(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let rows = vec![w; self.config.layers];
        tape.stack(&rows)
    }

    /// Generator with the frozen weights bound as constants.
    pub fn generate_on(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        let p = self.generator.bind(tape, false);
        generator::forward(tape, &self.config, &p, code)
    }

    /// Generator with caller-bound weights (for tuning a copy).
    pub fn generate_with(&self, tape: &mut Tape, params: &GeneratorParams<Var>, code: Var) -> Result<Var> {
        generator::forward(tape, &self.config, params, code)
    }

    fn check_image(&self, tape: &Tape, img: Var, op: &'static str) -> Result<()> {
        let r = self.config.resolution;
        if tape.shape(img) != [3, r, r] {
            return Err(Error::dim(op, format!("image shape {:?}, world expects [3, {r}, {r}]", tape.shape(img))));
        }
        Ok(())
    }

    /// Unit-norm identity embedding.
    pub fn embed_on(&self, tape: &mut Tape, img: Var, which: Embedder) -> Result<Var> {
        self.check_image(tape, img, "embed_identity")?;
        let f = self.front.forward(tape, img, self.config.resolution)?;
        match which {
            Embedder::Train => self.embed_train.forward(tape, f.identity),
            Embedder::Eval => self.embed_eval.forward(tape, f.identity),
        }
    }

    /// `id ‖ expr ‖ pose` coefficients as one vector.
    pub fn coeffs_on(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        self.check_image(tape, img, "extract_coeffs")?;
        let f = self.front.forward(tape, img, self.config.resolution)?;
        self.coeffs.forward(tape, &f)
    }

    pub fn landmarks_on(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        if tape.shape(coeffs) != [self.config.coeff_width()] {
            return Err(Error::dim(
                "decode_landmarks",
                format!("coefficients have shape {:?}, expected [{}]", tape.shape(coeffs), self.config.coeff_width()),
            ));
        }
        self.landmarks.forward(tape, coeffs)
    }

    // ---- value-level operations ------------------------------------------

    pub fn map_z_to_w(&self, z: &LatentCode) -> Result<LatentCode> {
        z.expect_space(Space::Z)?;
        let mut t = Tape::new();
        let v = t.constant(z.data().clone());
        let w = self.map_on(&mut t, v)?;
        LatentCode::new(Space::W, t.value(w).clone())
    }

    pub fn broadcast_w(&self, w: &LatentCode) -> Result<LatentCode> {
        if w.width() != self.config.latent_dim {
            return Err(Error::dim("broadcast_w", format!("width {} vs {}", w.width(), self.config.latent_dim)));
        }
        w.broadcast(self.config.layers)
    }

    pub fn generate(&self, code: &LatentCode) -> Result<Image> {
        self.generate_using(&self.generator, code)
    }

    pub fn generate_using(&self, params: &GeneratorParams<Array>, code: &LatentCode) -> Result<Image> {
        code.expect_space(Space::WPlus)?;
        let mut t = Tape::new();
        let p = params.bind(&mut t, false);
        let c = t.constant(code.data().clone());
        let img = generator::forward(&mut t, &self.config, &p, c)?;
        Image::new(t.value(img).clone())
    }

    pub fn embed_identity(&self, img: &Image, which: Embedder) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let v = t.constant(img.data().clone());
        let e = self.embed_on(&mut t, v, which)?;
        Ok(t.value(e).data().to_vec())
    }

    pub fn extract_coeffs(&self, img: &Image) -> Result<CoeffVector> {
        let mut t = Tape::new();
        let v = t.constant(img.data().clone());
        let c = self.coeffs_on(&mut t, v)?;
        CoeffVector::from_slice(&self.config, t.value(c).data())
    }

    /// `(K, 2)` landmark coordinates.
    pub fn decode_landmarks(&self, c: &CoeffVector) -> Result<Array> {
        let v = c.to_vec();
        let mut t = Tape::new();
        let cv = t.constant(Array::new([v.len()], v)?);
        let q = self.landmarks_on(&mut t, cv)?;
        Ok(t.value(q).clone())
    }

    /// Draws `z ~ N(0, I)` and maps it to W.
    pub fn sample_w(&self, rng: &mut impl rand::Rng) -> Result<LatentCode> {
        let z = LatentCode::z(normal_vec(rng, self.config.latent_dim))?;
        self.map_z_to_w(&z)
    }

    // ---- persistence -----------------------------------------------------

    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, l) in self.mapping.layers.iter().enumerate() {
            out.extend(l.named(&format!("map.{i}")));
        }
        out.extend(self.generator.entries());
        out.extend([
            ("front.low_mean".to_string(), &self.front.low_mean),
            ("front.low_inv_std".to_string(), &self.front.low_inv_std),
            ("front.band_mean".to_string(), &self.front.band_mean),
            ("front.band_inv_std".to_string(), &self.front.band_inv_std),
            ("front.id_proj".to_string(), &self.front.id_proj),
        ]);
        for (tag, e) in [("train", &self.embed_train), ("eval", &self.embed_eval)] {
            out.extend(e.hidden.named(&format!("embed.{tag}.hidden")));
            out.extend(e.out.named(&format!("embed.{tag}.out")));
        }
        out.extend(self.coeffs.id.named("coeffs.id"));
        out.extend(self.coeffs.expr.named("coeffs.expr"));
        out.extend(self.coeffs.pose.named("coeffs.pose"));
        out.extend([
            ("landmarks.mean".to_string(), &self.landmarks.mean),
            ("landmarks.basis".to_string(), &self.landmarks.basis),
        ]);
        out.extend(self.landmarks.hidden.named("landmarks.hidden"));
        out.push(("landmarks.nonlinear".to_string(), &self.landmarks.nonlinear));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut cfg = vec![("seed".to_string(), self.seed.to_string())];
        cfg.extend(self.config.to_pairs());
        container::encode(WORLD_MAGIC, &cfg, &self.named_arrays())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Container = container::decode(WORLD_MAGIC, bytes)?;
        let config = WorldConfig::from_container(&c)?;
        config.validate()?;
        let seed: u64 = c.parse_config("seed")?;
        let mut table: HashMap<String, Array> = c.arrays.into_iter().collect();
        let mut lookup = |name: &str| -> Result<Array> {
            table
                .remove(name)
                .ok_or_else(|| Error::Format(format!("world file lacks array {name:?}")))
        };
        let mapping = MappingNet {
            layers: (0..nets::MAPPING_DEPTH)
                .map(|i| Dense::load(&format!("map.{i}"), &mut lookup))
                .collect::<Result<_>>()?,
        };
        let generator = generator::from_lookup(&config, &mut lookup)?;
        let front = FrontEnd {
            low_mean: lookup("front.low_mean")?,
            low_inv_std: lookup("front.low_inv_std")?,
            band_mean: lookup("front.band_mean")?,
            band_inv_std: lookup("front.band_inv_std")?,
            id_proj: lookup("front.id_proj")?,
        };
        let mut embedder = |tag: &str| -> Result<IdentityEmbedder> {
            Ok(IdentityEmbedder {
                hidden: Dense::load(&format!("embed.{tag}.hidden"), &mut lookup)?,
                out: Dense::load(&format!("embed.{tag}.out"), &mut lookup)?,
            })
        };
        let embed_train = embedder("train")?;
        let embed_eval = embedder("eval")?;
        let coeffs = CoeffExtractor {
            id: Dense::load("coeffs.id", &mut lookup)?,
            expr: Dense::load("coeffs.expr", &mut lookup)?,
            pose: Dense::load("coeffs.pose", &mut lookup)?,
        };
        let landmarks = LandmarkDecoder {
            mean: lookup("landmarks.mean")?,
            basis: lookup("landmarks.basis")?,
            hidden: Dense::load("landmarks.hidden", &mut lookup)?,
            nonlinear: lookup("landmarks.nonlinear")?,
        };
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra:?} in world file")));
        }
        Ok(Self {
            seed,
            config,
            mapping,
            generator,
            front,
            embed_train,
            embed_eval,
            coeffs,
            landmarks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 over the serialized world.
    pub fn checksum(&self) -> Result<String> {
        Ok(container::sha256_hex(&self.to_bytes()?))
    }
}

