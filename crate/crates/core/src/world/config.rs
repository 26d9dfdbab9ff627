// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};

/// Shape of a frozen world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldConfig {
    /// Latent width.
    pub latent_dim: usize,
    /// Number of W+ style layers (two per generator level).
    pub layers: usize,
    /// Output image resolution.
    pub resolution: usize,
    /// Identity embedding width.
    pub embed_dim: usize,
    pub id_coeffs: usize,
    pub expr_coeffs: usize,
    pub pose_coeffs: usize,
    pub landmarks: usize,
}

impl Default for WorldConfig {
    /// Desk scale: narrow latents, full 18-layer W+ stack, 32x32 output.
    fn default() -> Self {
        Self {
            latent_dim: 64,
            layers: 18,
            resolution: 32,
            embed_dim: 512,
            id_coeffs: 16,
            expr_coeffs: 8,
            pose_coeffs: 4,
            landmarks: 68,
        }
    }
}

impl WorldConfig {
    /// Full-width latents (18 x 512 W+ codes) at the desk resolution.
    pub fn full_width() -> Self {
        Self {
            latent_dim: 512,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.layers / 2
    }

    /// Resolution of generator level `k`: 4, 8, 16, ... capped at the output.
    pub fn level_resolution(&self, k: usize) -> usize {
        let r = 4usize.saturating_mul(1usize.checked_shl(k as u32).unwrap_or(usize::MAX));
        r.min(self.resolution)
    }

    pub fn coeff_width(&self) -> usize {
        self.id_coeffs + self.expr_coeffs + self.pose_coeffs
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        if self.layers < 2 || self.layers % 2 != 0 {
            return fail(format!("layers must be even and >= 2, got {}", self.layers));
        }
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return fail(format!("resolution must be a power of two >= 8, got {}", self.resolution));
        }
        if self.level_resolution(self.levels() - 1) < self.resolution {
            return fail(format!(
                "{} layers cannot reach resolution {}",
                self.layers, self.resolution
            ));
        }
        if [self.embed_dim, self.id_coeffs, self.expr_coeffs, self.pose_coeffs, self.landmarks]
            .contains(&0)
        {
            return fail("embedding, coefficient and landmark widths must be positive".into());
        }
        Ok(())
    }

    /// `key = value` pairs without a section prefix.
    pub fn to_pairs(self) -> Vec<(String, String)> {
        [
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
            ("resolution", self.resolution),
            ("embed_dim", self.embed_dim),
            ("id_coeffs", self.id_coeffs),
            ("expr_coeffs", self.expr_coeffs),
            ("pose_coeffs", self.pose_coeffs),
            ("landmarks", self.landmarks),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    /// Sets one field by its `to_pairs` key. Returns `Ok(false)` for
    /// unknown keys.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        let v = || crate::settings::value::<usize>(key, raw);
        match key {
            "latent_dim" => self.latent_dim = v()?,
            "layers" => self.layers = v()?,
            "resolution" => self.resolution = v()?,
            "embed_dim" => self.embed_dim = v()?,
            "id_coeffs" => self.id_coeffs = v()?,
            "expr_coeffs" => self.expr_coeffs = v()?,
            "pose_coeffs" => self.pose_coeffs = v()?,
            "landmarks" => self.landmarks = v()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn from_container(c: &crate::container::Container) -> Result<Self> {
        Ok(Self {
            latent_dim: c.parse_config("latent_dim")?,
            layers: c.parse_config("layers")?,
            resolution: c.parse_config("resolution")?,
            embed_dim: c.parse_config("embed_dim")?,
            id_coeffs: c.parse_config("id_coeffs")?,
            expr_coeffs: c.parse_config("expr_coeffs")?,
            pose_coeffs: c.parse_config("pose_coeffs")?,
            landmarks: c.parse_config("landmarks")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(WorldConfig::default().validate().is_ok());
        assert!(WorldConfig::full_width().validate().is_ok());
        let bad = [
            WorldConfig { layers: 17, ..Default::default() },
            WorldConfig { resolution: 24, ..Default::default() },
            WorldConfig { layers: 4, ..Default::default() },
            WorldConfig { landmarks: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn apply_round_trips_pairs() {
        let mut c = WorldConfig::default();
        for (k, v) in WorldConfig::full_width().to_pairs() {
            assert!(c.apply(&k, &v).unwrap());
        }
        assert_eq!(c, WorldConfig::full_width());
        assert!(!c.apply("width", "3").unwrap());
        assert!(c.apply("layers", "x").is_err());
    }

    #[test]
    fn level_resolutions() {
        let c = WorldConfig::default();
        let r: Vec<usize> = (0..c.levels()).map(|k| c.level_resolution(k)).collect();
        assert_eq!(r, vec![4, 8, 16, 32, 32, 32, 32, 32, 32]);
    }
}
