// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::str::FromStr;

use crate::diff::Array;
use crate::error::{Error, Result};

/// Generator input space a latent code lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    /// Standard-normal sampling space.
    Z,
    /// Output of the mapping network.
    W,
    /// One W vector per generator style layer.
    WPlus,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Z => "Z",
            Space::W => "W",
            Space::WPlus => "W+",
        })
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "z" => Ok(Space::Z),
            "w" => Ok(Space::W),
            "w+" | "wplus" => Ok(Space::WPlus),
            other => Err(Error::Config(format!("unknown latent space {other:?}"))),
        }
    }
}

/// A latent vector (Z, W) or per-layer stack (W+), tagged with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    space: Space,
    data: Array,
}

impl LatentCode {
    pub fn new(space: Space, data: Array) -> Result<Self> {
        let ok = match space {
            Space::Z | Space::W => data.ndim() == 1,
            Space::WPlus => data.ndim() == 2,
        };
        if !ok {
            return Err(Error::dim(
                "latent code",
                format!("shape {:?} is invalid for space {space}", data.shape()),
            ));
        }
        Ok(Self { space, data })
    }

    pub fn z(values: Vec<f64>) -> Result<Self> {
        Self::new(Space::Z, Array::new([values.len()], values)?)
    }

    pub fn w(values: Vec<f64>) -> Result<Self> {
        Self::new(Space::W, Array::new([values.len()], values)?)
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn into_data(self) -> Array {
        self.data
    }

    /// Width of one vector.
    pub fn width(&self) -> usize {
        *self.data.shape().last().expect("non-empty shape")
    }

    /// Number of stacked layer vectors (1 for Z and W).
    pub fn num_layers(&self) -> usize {
        match self.space {
            Space::WPlus => self.data.shape()[0],
            _ => 1,
        }
    }

    pub fn expect_space(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(Error::Space {
                expected: space,
                found: self.space,
            });
        }
        Ok(())
    }

    /// Layer `i` of a W+ code, or the vector itself for Z/W (with `i == 0`).
    pub fn layer(&self, i: usize) -> Result<&[f64]> {
        let n = self.num_layers();
        if i >= n {
            return Err(Error::Index { index: i, len: n });
        }
        let w = self.width();
        Ok(&self.data.data()[i * w..(i + 1) * w])
    }

    /// Repeats a W code into `layers` identical W+ rows.
    pub fn broadcast(&self, layers: usize) -> Result<LatentCode> {
        self.expect_space(Space::W)?;
        if layers == 0 {
            return Err(Error::Config("cannot broadcast to zero layers".into()));
        }
        let d = self.width();
        let mut out = Vec::with_capacity(layers * d);
        for _ in 0..layers {
            out.extend_from_slice(self.data.data());
        }
        LatentCode::new(Space::WPlus, Array::new([layers, d], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_repeats_rows() {
        let w = LatentCode::w((0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let wp = w.broadcast(18).unwrap();
        assert_eq!(wp.data().shape(), &[18, 8]);
        for i in 0..18 {
            assert_eq!(wp.layer(i).unwrap(), w.data().data());
        }
        assert_eq!(wp.layer(7).unwrap(), wp.layer(3).unwrap());
        assert!(wp.broadcast(2).is_err());
    }

    #[test]
    fn full_width_shape() {
        let w = LatentCode::w(vec![0.25; 512]).unwrap();
        assert_eq!(w.broadcast(18).unwrap().data().shape(), &[18, 512]);
    }

    #[test]
    fn space_parsing() {
        assert_eq!("W+".parse::<Space>().unwrap(), Space::WPlus);
        assert_eq!("wplus".parse::<Space>().unwrap(), Space::WPlus);
        assert_eq!("z".parse::<Space>().unwrap(), Space::Z);
        assert!("x".parse::<Space>().is_err());
    }
}
