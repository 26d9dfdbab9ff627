// SPDX-License-Identifier: Apache-2.0

//! Principal directions of mapped codes and edits along them.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::groups::LayerGroup;
use crate::container::{self, Container};
use crate::diff::Array;
use crate::error::{Error, Result};
use crate::latent::{LatentCode, Space};
use crate::rng::{normal_vec, stream};
use crate::world::FrozenWorld;

pub const PCA_MAGIC: &[u8; 8] = b"LSPCA001";

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit directions, largest variance first.
    pub directions: Vec<Vec<f64>>,
    /// Variance along each direction.
    pub variances: Vec<f64>,
}

/// Top `k` principal components of `n_samples` mapped codes drawn from the
/// `seed` stream. Each direction's largest-magnitude entry is positive.
pub fn pca_directions(world: &FrozenWorld, n_samples: usize, k: usize, seed: u64) -> Result<Pca> {
    let d = world.config().latent_dim;
    if k == 0 || k > d || n_samples < k || n_samples < 2 {
        return Err(Error::Config(format!(
            "pca needs 1 <= k <= {d} and n_samples >= max(k, 2), got k={k}, n_samples={n_samples}"
        )));
    }
    let mut rng = stream(seed, "pca/samples");
    let mut ws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = LatentCode::z(normal_vec(&mut rng, d))?;
        ws.push(world.map_z_to_w(&z)?.into_data().data().to_vec());
    }
    let n = n_samples as f64;
    let mut mean = vec![0.0; d];
    for w in &ws {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v / n;
        }
    }
    let centered = DMatrix::from_fn(n_samples, d, |i, j| ws[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    // Stable sort keeps ties in index order, so the result is deterministic.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut directions = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        directions.push(v);
        variances.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(Pca {
        mean,
        directions,
        variances,
    })
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (k, d) = (self.directions.len(), self.dim());
        let dirs = Array::new([k, d], self.directions.concat())?;
        let mean = Array::vector(self.mean.clone());
        let var = Array::vector(self.variances.clone());
        container::encode(
            PCA_MAGIC,
            &[("k".into(), k.to_string()), ("dim".into(), d.to_string())],
            &[("mean".into(), &mean), ("directions".into(), &dirs), ("variances".into(), &var)],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Container = container::decode(PCA_MAGIC, bytes)?;
        let (k, d): (usize, usize) = (c.parse_config("k")?, c.parse_config("dim")?);
        let get = |name: &str| {
            c.arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.data().to_vec())
                .ok_or_else(|| Error::Format(format!("pca file lacks {name:?}")))
        };
        let dirs = get("directions")?;
        if dirs.len() != k * d {
            return Err(Error::Format("pca directions have the wrong size".into()));
        }
        Ok(Self {
            mean: get("mean")?,
            directions: dirs.chunks(d).map(<[f64]>::to_vec).collect(),
            variances: get("variances")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Adds `magnitude * direction` to every layer of a W+ code, or only to the
/// layers of `group`.
pub fn edit(code: &LatentCode, direction: &[f64], magnitude: f64, group: Option<LayerGroup>) -> Result<LatentCode> {
    code.expect_space(Space::WPlus)?;
    let (n, d) = (code.num_layers(), code.width());
    if direction.len() != d {
        return Err(Error::dim("edit", format!("direction of {} for codes of width {d}", direction.len())));
    }
    let layers: Vec<usize> = match group {
        Some(g) => g.layers(n),
        None => (0..n).collect(),
    };
    let mut out = code.data().data().to_vec();
    for l in layers {
        for (x, u) in out[l * d..(l + 1) * d].iter_mut().zip(direction) {
            *x += magnitude * u;
        }
    }
    LatentCode::new(Space::WPlus, Array::new([n, d], out)?)
}
