use serde::{Deserialize, Serialize};

use crate::error::{MofsError, Result};
use crate::tensor::Tensor;

/// A single-channel scalar field on an `H×W` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

pub const MIN_SIDE: usize = 4;

impl Field {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(MofsError::Shape(format!("field {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if values.len() != h * w {
            return Err(MofsError::Shape(format!("{} values for a {h}x{w} field", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MofsError::NonFinite(format!("field entry {i}")));
        }
        Ok(Self { h, w, values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self { h, w, values: vec![v; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                values.push(f(i, j));
            }
        }
        Self::new(h, w, values)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { h: self.h, w: self.w, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Token layout: `(H·W) × 1`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::column(self.values.clone())
    }

    pub fn from_tensor(t: &Tensor, h: usize, w: usize) -> Result<Self> {
        if t.len() != h * w {
            return Err(MofsError::Shape(format!("tensor {:?} is not a {h}x{w} field", t.shape())));
        }
        Self::new(h, w, t.data().to_vec())
    }
}
