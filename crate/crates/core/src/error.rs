// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use crate::latent::Space;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("latent space error: expected {expected}, found {found}")]
    Space { expected: Space, found: Space },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numerical abort: {0}")]
    Abort(AbortReport),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Diagnostics attached to an aborted optimization.
#[derive(Debug, Clone)]
pub struct AbortReport {
    pub step: usize,
    pub id_loss: f64,
    pub lp_loss: f64,
    pub shape_loss: f64,
    pub total: f64,
}

impl fmt::Display for AbortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} produced a non-finite objective (id={}, lp={}, shape={}, total={})",
            self.step, self.id_loss, self.lp_loss, self.shape_loss, self.total
        )
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
