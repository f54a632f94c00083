//! Fixed-width node features: a one-hot operation type followed by
//! sinusoidal encodings of the node's attributes and output shape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, MAX_ATTRS, MAX_SHAPE_RANK};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodingError {
    #[error("index {index} out of range for one-hot of width {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("non-finite value {0} cannot be encoded")]
    NonFinite(f64),
    #[error("invalid encoding config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub op_onehot_dim: usize,
    /// Budget for all attribute slots together.
    pub attr_sin_dim: usize,
    /// Budget for all shape slots together.
    pub shape_sin_dim: usize,
    pub base_frequency: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self::latency()
    }
}

impl EncodingConfig {
    /// 32 one-hot + 80 attribute + 80 shape = 192 columns.
    pub fn latency() -> Self {
        Self { op_onehot_dim: 32, attr_sin_dim: 80, shape_sin_dim: 80, base_frequency: 10000.0 }
    }

    /// One-hot operation type only.
    pub fn accuracy() -> Self {
        Self { op_onehot_dim: 32, attr_sin_dim: 0, shape_sin_dim: 0, base_frequency: 10000.0 }
    }

    pub fn total_dim(&self) -> usize {
        self.op_onehot_dim + self.attr_sin_dim + self.shape_sin_dim
    }

    /// Width of one attribute slot (the budget is split evenly over
    /// `MAX_ATTRS` slots).
    pub fn attr_slot_dim(&self) -> usize {
        self.attr_sin_dim / MAX_ATTRS
    }

    pub fn shape_slot_dim(&self) -> usize {
        self.shape_sin_dim / MAX_SHAPE_RANK
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        let bad = |m: String| Err(EncodingError::InvalidConfig(m));
        if self.op_onehot_dim < crate::dag::NUM_OP_TYPES {
            return bad(format!("op_onehot_dim {} < {}", self.op_onehot_dim, crate::dag::NUM_OP_TYPES));
        }
        if !self.attr_sin_dim.is_multiple_of(2 * MAX_ATTRS) {
            return bad(format!("attr_sin_dim {} must be a multiple of {}", self.attr_sin_dim, 2 * MAX_ATTRS));
        }
        if !self.shape_sin_dim.is_multiple_of(2 * MAX_SHAPE_RANK) {
            return bad(format!("shape_sin_dim {} must be a multiple of {}", self.shape_sin_dim, 2 * MAX_SHAPE_RANK));
        }
        if !(self.base_frequency > 1.0 && self.base_frequency.is_finite()) {
            return bad(format!("base_frequency {} must be > 1", self.base_frequency));
        }
        Ok(())
    }
}

pub fn one_hot(index: usize, dim: usize) -> Result<Vec<f64>, EncodingError> {
    if index >= dim {
        return Err(EncodingError::IndexOutOfRange { index, dim });
    }
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    Ok(v)
}

/// `v[2j] = sin(x / base^(2j/dim))`, `v[2j+1] = cos(x / base^(2j/dim))`.
pub fn sinusoidal(x: f64, dim: usize, base: f64) -> Result<Vec<f64>, EncodingError> {
    let mut out = vec![0.0; dim];
    sinusoidal_into(x, base, &mut out)?;
    Ok(out)
}

fn sinusoidal_into(x: f64, base: f64, out: &mut [f64]) -> Result<(), EncodingError> {
    if !x.is_finite() {
        return Err(EncodingError::NonFinite(x));
    }
    let dim = out.len();
    if !dim.is_multiple_of(2) {
        return Err(EncodingError::InvalidConfig(format!("sinusoidal width {dim} is odd")));
    }
    if !(base > 1.0) {
        return Err(EncodingError::InvalidConfig(format!("base {base} must be > 1")));
    }
    for j in 0..dim / 2 {
        let freq = base.powf((2 * j) as f64 / dim as f64);
        let (s, c) = (x / freq).sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = c;
    }
    Ok(())
}

/// Row-major `n × cfg.total_dim()` feature matrix.
pub fn encode_graph(dag: &Dag, cfg: &EncodingConfig) -> Result<Vec<f64>, EncodingError> {
    cfg.validate()?;
    let width = cfg.total_dim();
    let mut z = vec![0.0; dag.len() * width];
    for (row, node) in z.chunks_exact_mut(width).zip(dag.nodes()) {
        let (onehot, rest) = row.split_at_mut(cfg.op_onehot_dim);
        let op = node.op_type as usize;
        if op >= onehot.len() {
            return Err(EncodingError::IndexOutOfRange { index: op, dim: onehot.len() });
        }
        onehot[op] = 1.0;

        let (attrs, shape) = rest.split_at_mut(cfg.attr_sin_dim);
        if cfg.attr_sin_dim > 0 {
            for (slot, block) in attrs.chunks_exact_mut(cfg.attr_slot_dim()).enumerate() {
                let x = node.attrs.get(slot).copied().unwrap_or(0.0);
                sinusoidal_into(x, cfg.base_frequency, block)?;
            }
        }
        if cfg.shape_sin_dim > 0 {
            for (slot, block) in shape.chunks_exact_mut(cfg.shape_slot_dim()).enumerate() {
                let x = node.shape.get(slot).map(|&s| s as f64).unwrap_or(0.0);
                sinusoidal_into(x, cfg.base_frequency, block)?;
            }
        }
    }
    Ok(z)
}
