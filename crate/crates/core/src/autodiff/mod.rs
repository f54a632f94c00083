//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as primitives are applied; a single
//! [`Tape::backward`] call walks the records in reverse and deposits
//! gradients on the leaves. There is no global state: a tape is owned by one
//! forward pass and thrown away afterwards.

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckReport, Objective, REL_ERR_FLOOR};
pub use tape::{Segment, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("attention mask row {0} has no allowed entry")]
    EmptyRowMask(usize),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tracked leaf")]
    DetachedGraph,
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
