//! Dense `f64` tensors, a reverse-mode tape, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckConfig, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for table of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("non-finite value after perturbing coordinate {coord} of tensor {tensor}")]
    NonFinite { tensor: usize, coord: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
