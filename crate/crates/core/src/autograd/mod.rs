//! Reverse-mode automatic differentiation, optimizers and a finite-difference
//! gradient checker.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{central_difference, finite_difference_check, five_point_check, five_point_difference};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamConfig, OptimState};
pub use tape::{Tape, Tensor, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("slice {start}..{end} out of bounds for shape {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        start: usize,
        end: usize,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: no operands")]
    Empty(&'static str),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("parameter/gradient count mismatch: {params} params, {grads} grads")]
    ArityMismatch { params: usize, grads: usize },
}
