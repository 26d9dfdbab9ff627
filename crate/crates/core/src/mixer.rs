// SPDX-License-Identifier: Apache-2.0

//! Trainable latent mixer: one residual stack of fully connected layers per
//! W+ layer (or a single one for Z and W codes).
//!
//! ```text
//! h_0 = s_i ‖ t_i
//! h_k = swish(W_k·h_{k-1} + b_k)      k < depth
//! out = α·t_i + W_depth·h_{depth-1} + b_depth
//! ```
//!
//! The first layer maps `2D -> D`, the rest `D -> D`. The final layer starts
//! at zero, so a fresh stack returns `α·t` exactly.

use std::collections::HashMap;
use std::path::Path;

use crate::container::{self, Container, MIXER_MAGIC};
use crate::diff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, Space};
use crate::rng::{normal_f32_vec, stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerConfig {
    pub fc_depth: usize,
    /// Width of one latent vector.
    pub latent_dim: usize,
    /// Residual coefficient on the target code.
    pub alpha: f64,
    pub space: Space,
    pub num_mixers: usize,
}

impl MixerConfig {
    /// Depth 5, `α = 1`, one mixer per layer for W+ and a single mixer for
    /// Z and W.
    pub fn new(space: Space, latent_dim: usize, layers: usize) -> Self {
        Self {
            fc_depth: 5,
            latent_dim,
            alpha: 1.0,
            space,
            num_mixers: if space == Space::WPlus { layers } else { 1 },
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc_depth == 0 {
            return Err(Error::Config("fc_depth must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 2], got {}", self.alpha)));
        }
        let ok = match self.space {
            Space::WPlus => self.num_mixers >= 1,
            Space::Z | Space::W => self.num_mixers == 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} mixers is inconsistent with space {}",
                self.num_mixers, self.space
            )));
        }
        Ok(())
    }

    fn to_pairs(self) -> Vec<(String, String)> {
        vec![
            ("fc_depth".into(), self.fc_depth.to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("space".into(), self.space.to_string()),
            ("num_mixers".into(), self.num_mixers.to_string()),
        ]
    }

    fn from_container(c: &Container) -> Result<Self> {
        let cfg = Self {
            fc_depth: c.parse_config("fc_depth")?,
            latent_dim: c.parse_config("latent_dim")?,
            alpha: c.parse_config("alpha")?,
            space: c.parse_config("space")?,
            num_mixers: c.parse_config("num_mixers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<T> {
    /// `(out, in)`
    pub weight: T,
    /// `(out,)`
    pub bias: T,
}

/// Parameters of one mixer, generic over storage and tape handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer<T> {
    pub layers: Vec<FcLayer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerStack {
    config: MixerConfig,
    mixers: Vec<Mixer<Array>>,
}

/// A stack whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub config: MixerConfig,
    pub mixers: Vec<Mixer<Var>>,
}

impl MixerStack {
    /// Seeded initialization: LeCun-normal hidden weights, zero biases and a
    /// zero final layer. Values are `f32`-representable so a fresh stack
    /// survives a checkpoint round trip unchanged.
    pub fn init(config: MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng = stream(seed, "mixer/init");
        let mut mixers = Vec::with_capacity(config.num_mixers);
        for _ in 0..config.num_mixers {
            let mut layers = Vec::with_capacity(config.fc_depth);
            for k in 0..config.fc_depth {
                let fan_in = if k == 0 { 2 * d } else { d };
                let weight = if k + 1 == config.fc_depth {
                    Array::zeros([d, fan_in])
                } else {
                    Array::new([d, fan_in], normal_f32_vec(&mut rng, d * fan_in, 1.0 / (fan_in as f64).sqrt()))?
                };
                layers.push(FcLayer {
                    weight,
                    bias: Array::zeros([d]),
                });
            }
            mixers.push(Mixer { layers });
        }
        Ok(Self { config, mixers })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn mixers(&self) -> &[Mixer<Array>] {
        &self.mixers
    }

    /// Every parameter array in a fixed order (mixer, layer, weight/bias).
    pub fn params(&self) -> Vec<&Array> {
        self.mixers
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|a| a.len()).sum()
    }

    /// Replaces all parameters, in [`MixerStack::params`] order.
    pub fn set_params(&mut self, values: Vec<Array>) -> Result<()> {
        let n = self.params().len();
        if values.len() != n {
            return Err(Error::dim("set_params", format!("{} arrays for {n} parameters", values.len())));
        }
        let mut it = values.into_iter();
        for m in &mut self.mixers {
            for l in &mut m.layers {
                for slot in [&mut l.weight, &mut l.bias] {
                    let v = it.next().expect("counted above");
                    if v.shape() != slot.shape() {
                        return Err(Error::dim(
                            "set_params",
                            format!("shape {:?} for parameter of shape {:?}", v.shape(), slot.shape()),
                        ));
                    }
                    *slot = v;
                }
            }
        }
        Ok(())
    }

    /// Mutable access for analyses that perturb single mixers.
    pub fn mixer_mut(&mut self, i: usize) -> Result<&mut Mixer<Array>> {
        let len = self.mixers.len();
        self.mixers.get_mut(i).ok_or(Error::Index { index: i, len })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundStack {
        let mut leaf = |a: &Array| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        BoundStack {
            config: self.config,
            mixers: self
                .mixers
                .iter()
                .map(|m| Mixer {
                    layers: m
                        .layers
                        .iter()
                        .map(|l| FcLayer {
                            weight: leaf(&l.weight),
                            bias: leaf(&l.bias),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Single-layer mix on plain vectors.
    pub fn mix_layer(&self, i: usize, s: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let sv = tape.constant(Array::vector(s.to_vec()));
        let tv = tape.constant(Array::vector(t.to_vec()));
        let out = b.mix_layer_on(&mut tape, i, sv, tv)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn mix(&self, s: &LatentCode, t: &LatentCode) -> Result<LatentCode> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let out = b.mix_codes_on(&mut tape, s, t)?;
        LatentCode::new(self.config.space, tape.value(out).clone())
    }

    fn named_arrays(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, m) in self.mixers.iter().enumerate() {
            for (k, l) in m.layers.iter().enumerate() {
                out.push((format!("mixer.{i}.fc{k}.weight"), &l.weight));
                out.push((format!("mixer.{i}.fc{k}.bias"), &l.bias));
            }
        }
        out
    }

    /// Checkpoint bytes; `extra` adds config entries such as optimizer
    /// hyperparameters.
    pub fn to_bytes(&self, extra: &[(String, String)]) -> Result<Vec<u8>> {
        let mut cfg = self.config.to_pairs();
        for (k, v) in extra {
            if cfg.iter().any(|(c, _)| c == k) {
                return Err(Error::Format(format!("checkpoint key {k:?} is reserved")));
            }
            cfg.push((k.clone(), v.clone()));
        }
        container::encode(MIXER_MAGIC, &cfg, &self.named_arrays())
    }

    /// Parses a checkpoint. Returns the stack and the full config block.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Vec<(String, String)>)> {
        let c = container::decode(MIXER_MAGIC, bytes)?;
        let config = MixerConfig::from_container(&c)?;
        let mut stack = Self::init(config, 0)?;
        let mut table: HashMap<String, Array> = c.arrays.into_iter().collect();
        let names: Vec<(String, Vec<usize>)> = stack
            .named_arrays()
            .into_iter()
            .map(|(n, a)| (n, a.shape().to_vec()))
            .collect();
        let mut values = Vec::with_capacity(names.len());
        for (name, shape) in names {
            let a = table
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks array {name:?}")))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", a.shape())));
            }
            values.push(a);
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra:?} in checkpoint")));
        }
        stack.set_params(values)?;
        Ok((stack, c.config))
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        container::write_file(path, &self.to_bytes(extra)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl BoundStack {
    pub fn mix_layer_on(&self, tape: &mut Tape, i: usize, s: Var, t: Var) -> Result<Var> {
        let len = self.mixers.len();
        let m = self.mixers.get(i).ok_or(Error::Index { index: i, len })?;
        let d = self.config.latent_dim;
        for v in [s, t] {
            if tape.shape(v) != [d] {
                return Err(Error::dim("mix_layer", format!("input shape {:?}, mixer width {d}", tape.shape(v))));
            }
        }
        let mut h = tape.concat(&[s, t])?;
        let last = m.layers.len() - 1;
        for (k, l) in m.layers.iter().enumerate() {
            let y = tape.matmul(l.weight, h)?;
            let y = tape.add(y, l.bias)?;
            h = if k < last { tape.swish(y)? } else { y };
        }
        let res = tape.scale(t, self.config.alpha)?;
        tape.add(res, h)
    }

    /// Mixes two codes of the stack's space already on the tape: `(L, D)`
    /// stacks for W+, `(D,)` vectors otherwise.
    pub fn mix_on(&self, tape: &mut Tape, s: Var, t: Var) -> Result<Var> {
        if tape.shape(s) != tape.shape(t) {
            return Err(Error::dim(
                "mix",
                format!("source {:?} vs target {:?}", tape.shape(s), tape.shape(t)),
            ));
        }
        match self.config.space {
            Space::WPlus => {
                let layers = tape.shape(s)[0];
                if tape.shape(s).len() != 2 || layers != self.mixers.len() {
                    return Err(Error::dim(
                        "mix",
                        format!("code shape {:?} for {} mixers", tape.shape(s), self.mixers.len()),
                    ));
                }
                let mut rows = Vec::with_capacity(layers);
                for i in 0..layers {
                    let si = tape.index(s, i)?;
                    let ti = tape.index(t, i)?;
                    rows.push(self.mix_layer_on(tape, i, si, ti)?);
                }
                tape.stack(&rows)
            }
            Space::Z | Space::W => self.mix_layer_on(tape, 0, s, t),
        }
    }

    /// Checks spaces and mixes two latent codes bound as constants.
    pub fn mix_codes_on(&self, tape: &mut Tape, s: &LatentCode, t: &LatentCode) -> Result<Var> {
        s.expect_space(self.config.space)?;
        t.expect_space(self.config.space)?;
        let sv = tape.constant(s.data().clone());
        let tv = tape.constant(t.data().clone());
        self.mix_on(tape, sv, tv)
    }
}
