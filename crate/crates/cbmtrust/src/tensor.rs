//! Dense row-major `f64` tensors.
//!
//! Conventions used across the crate: feature maps are `[channels, height,
//! width]`, matrices are `[rows, cols]`, vectors are `[n]`, and scalars are
//! shape `[1]`. Spatial coordinates are always `(row, col)` with the origin
//! at the top-left.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn off3(shape: &[usize], c: usize, h: usize, w: usize) -> usize {
        (c * shape[1] + h) * shape[2] + w
    }

    #[inline]
    pub fn off2(shape: &[usize], r: usize, c: usize) -> usize {
        r * shape[1] + c
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[Self::off3(&self.shape, c, h, w)]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[Self::off2(&self.shape, r, c)]
    }

    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let off = Self::off3(&self.shape, c, h, w);
        self.data[off] = v;
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let off = Self::off2(&self.shape, r, c);
        self.data[off] = v;
    }
}
