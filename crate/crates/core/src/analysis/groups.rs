// SPDX-License-Identifier: Apache-2.0

//! W+ layer groups by generator resolution, and layer-restricted swaps.

use std::fmt;
use std::str::FromStr;

use crate::diff::Array;
use crate::error::{Error, Result};
use crate::latent::{LatentCode, Space};

/// Resolution bands over the 9 levels of an 18-layer generator.
const LEVEL_GROUP: [usize; 9] = [0, 0, 1, 1, 2, 2, 3, 3, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGroup {
    Coarse,
    Middle,
    Fine1,
    Fine2,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 4] = [LayerGroup::Coarse, LayerGroup::Middle, LayerGroup::Fine1, LayerGroup::Fine2];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Coarse => "coarse",
            LayerGroup::Middle => "middle",
            LayerGroup::Fine1 => "fine1",
            LayerGroup::Fine2 => "fine2",
        }
    }

    /// Group of style layer `l` in an `layers`-deep stack. Layer `l` sits at
    /// level `l / 2`; other depths map levels onto the 9-level table
    /// proportionally.
    pub fn of_layer(l: usize, layers: usize) -> LayerGroup {
        let levels = (layers / 2).max(1);
        let k = l / 2;
        Self::ALL[LEVEL_GROUP[(k * 9 / levels).min(8)]]
    }

    /// Layer indices of this group, ascending.
    pub fn layers(self, layers: usize) -> Vec<usize> {
        (0..layers).filter(|&l| Self::of_layer(l, layers) == self).collect()
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown layer group {s:?}")))
    }
}

/// Takes layers in `layers` from `code_swap` and the rest from `code_t`.
pub fn layerwise_swap_layers(code_t: &LatentCode, code_swap: &LatentCode, layers: &[usize]) -> Result<LatentCode> {
    code_t.expect_space(Space::WPlus)?;
    code_swap.expect_space(Space::WPlus)?;
    if code_t.data().shape() != code_swap.data().shape() {
        return Err(Error::dim(
            "layerwise_swap",
            format!("{:?} vs {:?}", code_t.data().shape(), code_swap.data().shape()),
        ));
    }
    let (n, d) = (code_t.num_layers(), code_t.width());
    let mut out = code_t.data().data().to_vec();
    for &l in layers {
        if l >= n {
            return Err(Error::Index { index: l, len: n });
        }
        out[l * d..(l + 1) * d].copy_from_slice(code_swap.layer(l)?);
    }
    LatentCode::new(Space::WPlus, Array::new([n, d], out)?)
}

pub fn layerwise_swap(code_t: &LatentCode, code_swap: &LatentCode, group: LayerGroup) -> Result<LatentCode> {
    layerwise_swap_layers(code_t, code_swap, &group.layers(code_t.num_layers()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighteen_layer_groups() {
        assert_eq!(LayerGroup::Coarse.layers(18), vec![0, 1, 2, 3]);
        assert_eq!(LayerGroup::Middle.layers(18), vec![4, 5, 6, 7]);
        assert_eq!(LayerGroup::Fine1.layers(18), vec![8, 9, 10, 11]);
        assert_eq!(LayerGroup::Fine2.layers(18), (12..18).collect::<Vec<_>>());
    }

    #[test]
    fn groups_partition_every_depth() {
        for layers in (2..=40).step_by(2) {
            let mut all: Vec<usize> = LayerGroup::ALL.iter().flat_map(|g| g.layers(layers)).collect();
            all.sort();
            assert_eq!(all, (0..layers).collect::<Vec<_>>(), "L={layers}");
            // Groups are contiguous and ordered from coarse to fine.
            let order: Vec<usize> = (0..layers).map(|l| LayerGroup::of_layer(l, layers) as usize).collect();
            assert!(order.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn names_round_trip() {
        for g in LayerGroup::ALL {
            assert_eq!(g.name().parse::<LayerGroup>().unwrap(), g);
        }
        assert!("mid".parse::<LayerGroup>().is_err());
    }

    #[test]
    fn empty_and_full_swaps() {
        let t = LatentCode::new(Space::WPlus, Array::new([4, 2], (0..8).map(f64::from).collect::<Vec<f64>>()).unwrap()).unwrap();
        let s = LatentCode::new(Space::WPlus, Array::new([4, 2], (10..18).map(f64::from).collect::<Vec<f64>>()).unwrap()).unwrap();
        assert_eq!(layerwise_swap_layers(&t, &s, &[]).unwrap(), t);
        assert_eq!(layerwise_swap_layers(&t, &s, &[0, 1, 2, 3]).unwrap(), s);
        let mid = layerwise_swap_layers(&t, &s, &[2]).unwrap();
        assert_eq!(mid.data().data(), &[0.0, 1.0, 2.0, 3.0, 14.0, 15.0, 6.0, 7.0]);
        assert!(layerwise_swap_layers(&t, &s, &[4]).is_err());
    }
}
