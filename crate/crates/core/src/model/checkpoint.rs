//! JSON parameter checkpoints.
//!
//! ```json
//! {"format": "dagpredict-checkpoint", "version": 1,
//!  "model": {...ModelConfig...},
//!  "target_norm": {"min": 0.5, "max": 12.0},
//!  "params": [{"name": "input.weight", "shape": [32, 160], "data": [...]}, ...]}
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so every `f64` survives a save/load cycle bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Params};
use crate::autodiff::Tensor;

pub const FORMAT: &str = "dagpredict-checkpoint";
pub const VERSION: u32 = 1;

/// Affine map of raw targets onto `[0, 1]` using the training split's range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub min: f64,
    pub max: f64,
}

impl TargetNorm {
    pub fn fit(targets: &[f64]) -> Option<Self> {
        let min = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let max = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min.is_finite() && max.is_finite()).then_some(Self { min, max })
    }

    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.min) / self.span()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.span() + self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    model: ModelConfig,
    #[serde(default)]
    target_norm: Option<TargetNorm>,
    params: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub target_norm: Option<TargetNorm>,
}

impl Checkpoint {
    pub fn new(params: Params, target_norm: Option<TargetNorm>) -> Self {
        Self { params, target_norm }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let c = Container {
            format: FORMAT.into(),
            version: VERSION,
            model: *self.params.config(),
            target_norm: self.target_norm,
            params: self
                .params
                .entries()
                .iter()
                .map(|p| NamedArray { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
                .collect(),
        };
        serde_json::to_string(&c).map_err(|e| ModelError::CheckpointMismatch(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let c: Container = serde_json::from_str(text).map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(ModelError::CheckpointMismatch(format!("unsupported format {} v{}", c.format, c.version)));
        }
        let named = c
            .params
            .into_iter()
            .map(|a| Ok((a.name, Tensor::new(&a.shape, a.data)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let params =
            Params::from_named(&c.model, named).map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
        Ok(Self { params, target_norm: c.target_norm })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
