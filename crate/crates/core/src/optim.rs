// SPDX-License-Identifier: Apache-2.0

//! Adaptive-moment optimizer with decoupled weight decay.

use crate::diff::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn to_pairs(self) -> Vec<(String, String)> {
        vec![
            ("optim.learning_rate".into(), format!("{:?}", self.learning_rate)),
            ("optim.beta1".into(), format!("{:?}", self.beta1)),
            ("optim.beta2".into(), format!("{:?}", self.beta2)),
            ("optim.eps".into(), format!("{:?}", self.eps)),
            ("optim.weight_decay".into(), format!("{:?}", self.weight_decay)),
        ]
    }
}

/// Optimizer state for a fixed list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Array]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Decay is applied to the parameters directly
    /// (`θ ← θ − lr·wd·θ`) before the bias-corrected moment step.
    pub fn step(&mut self, params: &[&Array], grads: &[Vec<f64>]) -> Result<Vec<Array>> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adamw",
                format!("{} params and {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::dim("adamw", format!("gradient of {} for parameter of {}", g.len(), p.len())));
            }
            let mut next = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let theta = p.data()[j] * (1.0 - c.learning_rate * c.weight_decay);
                next.push(theta - c.learning_rate * mhat / (vhat.sqrt() + c.eps));
            }
            out.push(Array::new(p.shape().to_vec(), next)?);
        }
        Ok(out)
    }
}
