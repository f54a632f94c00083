//! The predictor: input projection, a stack of masked-attention plus
//! graph feed-forward blocks, and a readout head.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod params;

use thiserror::Error;

pub use checkpoint::{Checkpoint, TargetNorm};
pub use config::{FfnVariant, ModelConfig, Readout};
pub use forward::{
    graph_operator, loss_and_grad, model_forward, predict_batch, predict_many, predict_prepared, Batch, Forward, GraphInput,
    Mode,
};
pub use gradcheck::{check_gradients, ModelGradCheck};
pub use params::{init_params, GraphOp, Layout, Param, ParamKind, Params, INIT_STD};

use crate::autodiff::TensorError;
use crate::dag::DagError;
use crate::encoding::EncodingError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[cfg(test)]
mod tests;
