// SPDX-License-Identifier: Apache-2.0

//! Self-describing binary container shared by world files and mixer
//! checkpoints.
//!
//! ```text
//! magic        8 bytes
//! config_len   u32 LE, then config_len bytes of UTF-8 "key=value\n" lines
//! n_arrays     u32 LE
//! per array    name_len u16 LE, name, ndim u8, ndim x u32 LE dims,
//!              prod(dims) x f32 LE values
//! checksum     SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diff::Array;
use crate::error::{Error, Result};

pub const WORLD_MAGIC: &[u8; 8] = b"LSWORLD1";
pub const MIXER_MAGIC: &[u8; 8] = b"LSMIX001";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: Vec<(String, String)>,
    pub arrays: Vec<(String, Array)>,
}

impl Container {
    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing config key {key:?}")))
    }

    pub fn parse_config<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.config_value(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value {raw:?} for {key:?}")))
    }
}

pub fn encode(magic: &[u8; 8], config: &[(String, String)], arrays: &[(String, &Array)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    let mut text = String::new();
    for (k, v) in config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("config entry {k:?} cannot be encoded")));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format("array name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 + 32 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let mut config = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        arrays.push((name, Array::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes before checksum".into()));
    }
    Ok(Container { config, arrays })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Array::new([2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]).unwrap();
        let b = Array::vector(vec![0.1, 0.2]);
        encode(
            MIXER_MAGIC,
            &[("alpha".into(), "1".into()), ("space".into(), "W+".into())],
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap()
    }

    #[test]
    fn decode_then_encode_is_bitwise_stable() {
        let bytes = sample();
        let c = decode(MIXER_MAGIC, &bytes).unwrap();
        assert_eq!(c.config_value("space").unwrap(), "W+");
        let refs: Vec<(String, &Array)> = c.arrays.iter().map(|(n, a)| (n.clone(), a)).collect();
        let again = encode(MIXER_MAGIC, &c.config, &refs).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corruption_and_wrong_magic_are_detected() {
        let mut bytes = sample();
        assert!(decode(WORLD_MAGIC, &bytes).is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(MIXER_MAGIC, &bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }
}
