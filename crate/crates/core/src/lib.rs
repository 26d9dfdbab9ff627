// SPDX-License-Identifier: Apache-2.0

//! Latent-space face swapping at desk scale.
//!
//! A trainable per-layer latent mixer combines source and target generator
//! codes into a swapped code. Training and evaluation run against a
//! seed-deterministic frozen world (mapping network, layered generator,
//! identity embedders and a coefficient/landmark pipeline), all built on the
//! small reverse-mode tape in [`diff`].

pub mod analysis;
pub mod container;
pub mod diff;
mod error;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod losses;
pub mod mixer;
pub mod optim;
pub mod rng;
pub mod settings;
pub mod trainer;
pub mod world;

pub use diff::{Array, Tape, Var};
pub use error::{AbortReport, Error, Result};
pub use image::Image;
pub use latent::{LatentCode, Space};
pub use losses::{LossBreakdown, LossWeights};
pub use mixer::{MixerConfig, MixerStack};
pub use trainer::{RunLog, TrainConfig};
pub use world::{FrozenWorld, WorldConfig};
