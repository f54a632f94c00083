use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dag::MaskVariant;
use crate::encoding::EncodingConfig;

/// How the feed-forward layer of each block aggregates over the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FfnVariant {
    /// `ReLU(H·W1 + [A·H·W⁺ ‖ Aᵀ·H·W⁻])·W2`
    #[default]
    BgiDefault,
    /// single `4d`-wide aggregation over `A`
    FwdOnlySplit,
    /// single `4d`-wide aggregation over `Aᵀ`
    BwdOnlySplit,
    /// four `d`-wide aggregations over `A`, `Aᵀ`, `AᵀA`, `AAᵀ`
    FourSplit,
    /// both halves use `D^-1/2 (A + Aᵀ) D^-1/2`
    SymmetricLaplacian,
    /// `ReLU(H·W1 ⊙ H_g)·W2`
    MultiplyCombine,
    /// no graph aggregation
    PlainFfn,
}

impl FfnVariant {
    pub const ALL: [FfnVariant; 7] = [
        FfnVariant::BgiDefault,
        FfnVariant::FwdOnlySplit,
        FfnVariant::BwdOnlySplit,
        FfnVariant::FourSplit,
        FfnVariant::SymmetricLaplacian,
        FfnVariant::MultiplyCombine,
        FfnVariant::PlainFfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FfnVariant::BgiDefault => "BgiDefault",
            FfnVariant::FwdOnlySplit => "FwdOnlySplit",
            FfnVariant::BwdOnlySplit => "BwdOnlySplit",
            FfnVariant::FourSplit => "FourSplit",
            FfnVariant::SymmetricLaplacian => "SymmetricLaplacian",
            FfnVariant::MultiplyCombine => "MultiplyCombine",
            FfnVariant::PlainFfn => "PlainFfn",
        }
    }
}

impl fmt::Display for FfnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FfnVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FfnVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown ffn variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    /// Virtual token attending everywhere; a linear layer reads its feature.
    ClassToken,
    /// Node features are summed and fed to a two-layer MLP.
    SumNodes,
}

impl FromStr for Readout {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classtoken" | "class_token" | "cls" => Ok(Readout::ClassToken),
            "sumnodes" | "sum_nodes" | "sum" => Ok(Readout::SumNodes),
            _ => Err(ModelError::InvalidConfig(format!("unknown readout `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoding: EncodingConfig,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub mask_variant: MaskVariant,
    pub ffn_variant: FfnVariant,
    pub readout: Readout,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Cell-level accuracy prediction: one-hot inputs, 160 channels,
    /// 12 blocks, class-token readout.
    pub fn accuracy() -> Self {
        Self {
            encoding: EncodingConfig::accuracy(),
            channels: 160,
            blocks: 12,
            heads: 4,
            ffn_expansion: 4,
            dropout: 0.1,
            mask_variant: MaskVariant::AsmaDefault,
            ffn_variant: FfnVariant::BgiDefault,
            readout: Readout::ClassToken,
            ln_eps: 1e-5,
        }
    }

    /// Whole-network latency prediction: 192-wide inputs, 512 channels,
    /// 2 blocks, summed-node readout.
    pub fn latency() -> Self {
        Self {
            encoding: EncodingConfig::latency(),
            channels: 512,
            blocks: 2,
            dropout: 0.05,
            readout: Readout::SumNodes,
            ..Self::accuracy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.ffn_expansion
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.total_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        self.encoding.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        if self.heads != 4 {
            return bad(format!("heads = {}, the mask sets define exactly 4", self.heads));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible by {} heads", self.channels, self.heads));
        }
        if self.ffn_expansion == 0 || !self.hidden().is_multiple_of(4) {
            return bad(format!("ffn hidden width {} must be a positive multiple of 4", self.hidden()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be > 0", self.ln_eps));
        }
        Ok(())
    }
}
