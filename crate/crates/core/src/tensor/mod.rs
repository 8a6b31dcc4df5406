//! N-d tensor values and a tape-based reverse-mode autodiff engine.
//!
//! All computation is in f64. Image batches use batch x channel x height x
//! width order with row-major storage. [`Tensor`] is a plain value; graphs
//! are built on a [`Tape`], which records every operation so that adjoints
//! can be replayed in reverse. Inference paths build a throwaway tape, so a
//! forward pass without retained gradients is a pure function.

mod grid;
mod tape;

pub use grid::{bilinear_resize, Grid};
pub use tape::{Tape, Var};

use crate::{Error, Result};

/// An N-dimensional array of f64 values with an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Creates a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient, which must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.data.len(), "grad length mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Extracts the `n`-th item along the first axis, dropping that axis.
    /// For a `[b, c, h, w]` batch this yields the `[c, h, w]` sample.
    pub fn index_axis0(&self, n: usize) -> Result<Tensor> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(Error::Shape(format!(
                "index {} out of bounds for axis 0 of shape {:?}",
                n, self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let sub = self.data[n * stride..(n + 1) * stride].to_vec();
        Tensor::new(self.shape[1..].to_vec(), sub)
    }
}

/// Numerically stable softmax of a slice: positive outputs summing to 1.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Elementwise logistic sigmoid of a scalar.
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
