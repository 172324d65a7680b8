//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference oracle.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, primitive_suite, DEFAULT_FD_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{init_normal, init_uniform, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Mode, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a single-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("finite-difference check needs a deterministic function (dropout was active)")]
    Stochastic,
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;
