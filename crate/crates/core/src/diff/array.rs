// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable row-major dense array of `f64`.
///
/// Cloning is cheap: the element buffer is reference counted, so frozen
/// network weights can be bound onto many tapes (and threads) without copies.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Array {
    /// Builds an array, checking that the shape matches the buffer and every
    /// element is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(Error::dim(
                "array",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("array construction (element {i})")));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Shape and length are trusted; finiteness is checked by the tape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn vector(data: impl Into<Vec<f64>>) -> Self {
        let data = data.into();
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same buffer, new shape.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::dim("row", format!("expected 2-D, got {:?}", self.shape)));
        }
        if i >= self.shape[0] {
            return Err(Error::Index {
                index: i,
                len: self.shape[0],
            });
        }
        let w = self.shape[1];
        Ok(Self::vector(self.data[i * w..(i + 1) * w].to_vec()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bitwise_eq(&self, other: &Array) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 6;
        write!(f, "Array{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_non_finite() {
        assert!(Array::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Array::new([0], Vec::<f64>::new()).is_err());
        assert!(matches!(
            Array::new([2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Array::new([2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn reshape_shares_buffer() {
        let a = Array::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = a.reshaped([3, 2]).unwrap();
        assert_eq!(b.data(), a.data());
        assert!(a.reshaped([4, 2]).is_err());
        assert_eq!(a.row(1).unwrap().data(), &[4., 5., 6.]);
        assert!(matches!(a.row(2), Err(Error::Index { .. })));
    }
}
