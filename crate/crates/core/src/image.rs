// SPDX-License-Identifier: Apache-2.0

//! Planar float images and their on-disk forms.
//!
//! The binary form is an 8-byte header (`R` then `channels`, both u32 LE)
//! followed by `channels * R * R` f32 LE values in planar order. A plain-text
//! PGM/PPM export is provided for quick viewing only.

use std::fmt::Write as _;
use std::path::Path;

use crate::diff::Array;
use crate::error::{Error, Result};

/// `(channels, R, R)` array of unconstrained reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array,
}

impl Image {
    pub fn new(data: Array) -> Result<Self> {
        match *data.shape() {
            [_, h, w] if h == w => Ok(Self { data }),
            _ => Err(Error::dim("image", format!("expected (C,R,R), got {:?}", data.shape()))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::dim(
                "image mse",
                format!("{:?} vs {:?}", self.data.shape(), other.data.shape()),
            ));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.resolution() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        for &v in self.data.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("image header truncated".into()));
        }
        let r = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = c
            .checked_mul(r)
            .and_then(|v| v.checked_mul(r))
            .ok_or_else(|| Error::Format("image header overflows".into()))?;
        if r == 0 || c == 0 || bytes.len() != 8 + 4 * n {
            return Err(Error::Format(format!(
                "image body has {} bytes, header ({c} x {r} x {r}) needs {}",
                bytes.len() - 8,
                4 * n
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect::<Vec<_>>();
        Self::new(Array::new([c, r, r], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Plain PPM (3 channels) or PGM (1 channel) text, min-max scaled to 0..255.
    pub fn to_netpbm(&self) -> String {
        let (c, r) = (self.channels(), self.resolution());
        let d = self.data.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |v: f64| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        let planes = if c >= 3 { 3 } else { 1 };
        let mut s = String::new();
        let _ = writeln!(s, "{}\n{r} {r}\n255", if planes == 3 { "P3" } else { "P2" });
        for y in 0..r {
            let mut line = Vec::with_capacity(r * planes);
            for x in 0..r {
                for ch in 0..planes {
                    line.push(px(d[(ch * r + y) * r + x]).to_string());
                }
            }
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_and_header() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let img = Image::new(Array::new([3, 2, 2], vals).unwrap()).unwrap();
        let bytes = img.to_bytes();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(Image::from_bytes(&bytes).unwrap(), img);
        assert!(Image::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn netpbm_header() {
        let img = Image::new(Array::filled([3, 2, 2], 0.5)).unwrap();
        assert!(img.to_netpbm().starts_with("P3\n2 2\n255\n"));
        assert!(Image::new(Array::zeros([3, 2, 3])).is_err());
    }
}
