//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node; [`Var`]
//! handles index into it. Calling [`Tape::backward`] on a scalar result
//! walks the nodes once in reverse order and accumulates gradients for
//! every tensor built with `requires_grad`. The op set is exactly what the
//! scoring model needs; there is no broadcasting beyond the documented
//! row-wise cases.

mod adam;
pub mod check;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::{sigmoid, softplus};

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumgradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of bounds for shape {shape:?}")]
    AxisOutOfBounds {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("backward requires a scalar (1 element), got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by backward; record a fresh forward pass")]
    TapeSpent,
    #[error("{op}: {what} must not be empty")]
    Empty { op: &'static str, what: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, NumgradError>;

/// A dense tensor of `f64` values in row-major order.
///
/// Tensors are plain values: construction validates shape and finiteness,
/// and nothing mutates them afterwards except the optimizer, which owns its
/// parameters exclusively. Rank 1 (`[n]`) and rank 2 (`[r, c]`) cover all
/// uses; scalars are `[1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumgradError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumgradError::NonFinite { index });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Builds a rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(NumgradError::Empty {
                op: "from_rows",
                what: "rows",
            });
        }
        let cols = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumgradError::ShapeMismatch {
                op: "from_rows",
                left: vec![rows.len(), cols],
                right: vec![1, bad.len()],
            });
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    /// A `[1, 1]` tensor holding one finite value.
    pub fn scalar(v: f64) -> Self {
        assert!(v.is_finite(), "scalar tensor must be finite, got {v}");
        Self::new_unchecked(vec![1, 1], vec![v])
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape, vec![0.0; numel])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape, vec![1.0; numel])
    }

    /// Marks the tensor as a trainable parameter; the tape will allocate a
    /// gradient slot for it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumgradError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2("row").expect("row() on non-matrix");
        &self.data[r * c..(r + 1) * c]
    }
}
