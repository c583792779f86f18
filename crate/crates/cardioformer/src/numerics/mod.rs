//! Dense tensors and a reverse-mode differentiation substrate.
//!
//! The operation catalog is deliberately closed: matrix multiply, elementwise
//! add/multiply, ReLU, softmax, layer/batch normalization, pointwise (1x1)
//! convolution, mean reduction, concatenation, slicing, a dropout gate, and
//! categorical cross-entropy from logits. Everything downstream is composed
//! from these. Training runs in `f32`; gradient checks run in `f64`, where
//! central finite differences are trustworthy at the 1e-4 tolerance.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

use std::fmt;

/// Result alias for tensor and graph operations.
pub type NumResult<T> = Result<T, NumericsError>;

/// Errors emitted by the tensor/graph substrate.
#[derive(Clone, Debug, PartialEq)]
pub enum NumericsError {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the named operation cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// Constructor data length does not match the shape's element count.
    DataLength { expected: usize, got: usize },
    /// An axis argument is out of range for the operand's rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// A non-shape argument (rate, step size, trial count) is out of range.
    InvalidArgument { op: &'static str, detail: String },
    /// An operation produced NaN or infinity.
    NonFinite { op: String },
    /// A class label is out of range for the logit vector.
    LabelOutOfRange { label: usize, classes: usize },
    /// Backward was requested on a non-scalar output.
    NonScalarOutput { shape: Vec<usize> },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::InvalidShape { op, shape, detail } => {
                write!(f, "{op}: invalid shape {shape:?} ({detail})")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            Self::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Self::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            Self::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Self::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Self::NonScalarOutput { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for NumericsError {}
