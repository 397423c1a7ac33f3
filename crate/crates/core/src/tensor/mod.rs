//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values are stored row-major as 32-bit floats. Interior arithmetic on the
//! tape runs in 64-bit so that finite-difference oracles stay meaningful;
//! persistent state (parameters, checkpoints, gradients) is 32-bit.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use tape::{NodeId, Tape};

use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape dimensions.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// Two operands are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has the wrong shape or rank for the named operation.
    BadOperand {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// Axis out of range for the operand's rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// An input to the named operation contained NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A node id referenced a different tape or a dropped node.
    UnknownNode(usize),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {shape:?} implies {} values, got {len}", numel_of(shape))
            }
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::BadOperand { op, shape, expected } => {
                write!(f, "{op}: operand shape {shape:?}, expected {expected}")
            }
            Self::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite input"),
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::UnknownNode(id) => write!(f, "unknown node id {id}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense multi-dimensional value with optional gradient buffer.
///
/// `shape == []` denotes a scalar holding one value. When `requires_grad`
/// is set, running a tape backward pass and accumulating into the owning
/// store populates `grad`; repeated accumulation adds (callers reset with
/// [`Tensor::zero_grad`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if numel_of(&shape) != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Uniform init on [-bound, +bound], the standard fan-in rule when
    /// called with `bound = 1/sqrt(fan_in)`.
    pub fn uniform(shape: Vec<usize>, bound: f32, rng: &mut impl rand::Rng) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = (*g as f64 + d) as f32;
        }
    }
}
