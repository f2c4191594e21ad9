//! Dense row-major arrays of `f64` used for volumes, vector fields and
//! intermediate tensors.
//!
//! The last axis is fastest in memory. Spatial data uses shape `[d, h, w]`
//! (extents along the k, j, i axes) and multichannel data `[c, d, h, w]`,
//! so a single channel is always one contiguous block. A voxel index is
//! written `(x, y, z) = (i, j, k)` with `x` indexing the `w` axis.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Field {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Field {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                what: "Field::from_vec",
                expected: vec![len],
                found: vec![data.len()],
            });
        }
        Ok(Field {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Scalar wrapped as a rank-0 field.
    pub fn scalar(value: f64) -> Self {
        Field {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                what: "Field::reshape",
                expected: vec![self.data.len()],
                found: vec![len],
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a rank-0 or length-1 field.
    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Shape [d, h, w] of a rank-3 field.
    pub fn dims3(&self) -> [usize; 3] {
        debug_assert_eq!(self.shape.len(), 3);
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    /// Shape [c, d, h, w] of a rank-4 field.
    pub fn dims4(&self) -> [usize; 4] {
        debug_assert_eq!(self.shape.len(), 4);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Contiguous slice of channel `c` of a rank-4 field.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.channel_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Elements per channel (product of all axes after the first).
    pub fn channel_len(&self) -> usize {
        debug_assert!(!self.shape.is_empty());
        self.shape[1..].iter().product()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.shape, other.shape);
        Field {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Flat offset of voxel (x, y, z) in a [d, h, w] block.
#[inline(always)]
pub fn idx3(h: usize, w: usize, x: usize, y: usize, z: usize) -> usize {
    (z * h + y) * w + x
}
