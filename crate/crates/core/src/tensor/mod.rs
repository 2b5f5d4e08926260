//! Dense f32 tensors, a recording computation graph with reverse-mode
//! differentiation, an Adam optimizer, and a binary parameter checkpoint
//! format. Everything downstream (NMT models, explainers, proxies) is built
//! on this module.

mod checkpoint;
mod graph;
mod optim;
mod store;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use graph::{Gradients, Graph, NodeId, PrimitiveOp, LOG_CLAMP};
pub use optim::{Adam, AdamConfig};
pub use store::ParamStore;

use crate::error::{Error, Result};

/// Dense row-major f32 tensor. Rank 1 tensors are treated as single-row
/// matrices by every graph primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("invalid shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Single-row matrix `[1, n]`.
    pub fn row(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Single-column matrix `[n, 1]`.
    pub fn col(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// (rows, cols) view; rank-1 tensors count as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sinusoidal position encoding table with `positions` rows (position 0
/// included) and `dim` columns.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0f32; positions * dim];
    for pos in 0..positions {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            };
        }
    }
    Tensor {
        shape: vec![positions, dim],
        data,
        requires_grad: false,
    }
}
