use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FfnVariant, ModelConfig, ModelError, Readout};
use crate::autodiff::Tensor;

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormShift,
}

impl ParamKind {
    /// Layer-norm parameters and biases are exempt from weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Indices into [`Params`] for one layer norm.
#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub gain: usize,
    pub shift: usize,
}

/// Which adjacency operator a graph-aggregation weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphOp {
    Fwd,
    Bwd,
    CommonParent,
    CommonChild,
    SymNorm,
}

#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub norm_attn: NormIdx,
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    pub value: Vec<usize>,
    pub out: usize,
    pub norm_ffn: NormIdx,
    pub w1: usize,
    pub b1: usize,
    pub graph: Vec<(GraphOp, usize)>,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub enum HeadIdx {
    Linear { w: usize, b: usize },
    Mlp { w1: usize, b1: usize, w2: usize, b2: usize },
}

/// Position of every parameter for a configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub input_w: usize,
    pub input_b: usize,
    pub input_norm: NormIdx,
    pub class_token: Option<usize>,
    pub blocks: Vec<BlockIdx>,
    pub head: HeadIdx,
    specs: Vec<(String, ParamKind, Vec<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, ParamKind, Vec<usize>)> = Vec::new();
        let mut add = |name: String, kind: ParamKind, shape: &[usize]| {
            specs.push((name, kind, shape.to_vec()));
            specs.len() - 1
        };
        let d = cfg.channels;
        let h = cfg.head_dim();
        let hidden = cfg.hidden();
        let norm = |add: &mut dyn FnMut(String, ParamKind, &[usize]) -> usize, prefix: &str| NormIdx {
            gain: add(format!("{prefix}.gain"), ParamKind::NormGain, &[1, d]),
            shift: add(format!("{prefix}.shift"), ParamKind::NormShift, &[1, d]),
        };

        let input_w = add("input.weight".into(), ParamKind::Weight, &[cfg.input_dim(), d]);
        let input_b = add("input.bias".into(), ParamKind::Bias, &[1, d]);
        let input_norm = norm(&mut add, "input.norm");
        let class_token = (cfg.readout == Readout::ClassToken)
            .then(|| add("class_token".into(), ParamKind::Weight, &[1, d]));

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let p = format!("blocks.{l}");
            let norm_attn = norm(&mut add, &format!("{p}.norm_attn"));
            let per_head = |what: &str, add: &mut dyn FnMut(String, ParamKind, &[usize]) -> usize| {
                (0..cfg.heads).map(|i| add(format!("{p}.attn.{what}.{i}"), ParamKind::Weight, &[d, h])).collect()
            };
            let query = per_head("query", &mut add);
            let key = per_head("key", &mut add);
            let value = per_head("value", &mut add);
            let out = add(format!("{p}.attn.out"), ParamKind::Weight, &[d, d]);
            let norm_ffn = norm(&mut add, &format!("{p}.norm_ffn"));
            let w1 = add(format!("{p}.ffn.w1"), ParamKind::Weight, &[d, hidden]);
            let b1 = add(format!("{p}.ffn.b1"), ParamKind::Bias, &[1, hidden]);
            let graph_ops: Vec<(GraphOp, usize)> = match cfg.ffn_variant {
                FfnVariant::BgiDefault | FfnVariant::MultiplyCombine => {
                    vec![(GraphOp::Fwd, hidden / 2), (GraphOp::Bwd, hidden / 2)]
                }
                FfnVariant::FwdOnlySplit => vec![(GraphOp::Fwd, hidden)],
                FfnVariant::BwdOnlySplit => vec![(GraphOp::Bwd, hidden)],
                FfnVariant::FourSplit => vec![
                    (GraphOp::Fwd, hidden / 4),
                    (GraphOp::Bwd, hidden / 4),
                    (GraphOp::CommonParent, hidden / 4),
                    (GraphOp::CommonChild, hidden / 4),
                ],
                FfnVariant::SymmetricLaplacian => vec![(GraphOp::SymNorm, hidden / 2), (GraphOp::SymNorm, hidden / 2)],
                FfnVariant::PlainFfn => vec![],
            };
            let graph = graph_ops
                .into_iter()
                .enumerate()
                .map(|(i, (op, w))| (op, add(format!("{p}.ffn.graph.{i}"), ParamKind::Weight, &[d, w])))
                .collect();
            let w2 = add(format!("{p}.ffn.w2"), ParamKind::Weight, &[hidden, d]);
            let b2 = add(format!("{p}.ffn.b2"), ParamKind::Bias, &[1, d]);
            blocks.push(BlockIdx { norm_attn, query, key, value, out, norm_ffn, w1, b1, graph, w2, b2 });
        }

        let head = match cfg.readout {
            Readout::ClassToken => HeadIdx::Linear {
                w: add("head.weight".into(), ParamKind::Weight, &[d, 1]),
                b: add("head.bias".into(), ParamKind::Bias, &[1, 1]),
            },
            Readout::SumNodes => HeadIdx::Mlp {
                w1: add("head.w1".into(), ParamKind::Weight, &[d, d]),
                b1: add("head.b1".into(), ParamKind::Bias, &[1, d]),
                w2: add("head.w2".into(), ParamKind::Weight, &[d, 1]),
                b2: add("head.b2".into(), ParamKind::Bias, &[1, 1]),
            },
        };
        Self { input_w, input_b, input_norm, class_token, blocks, head, specs }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = (&str, ParamKind, &[usize])> {
        self.specs.iter().map(|(n, k, s)| (n.as_str(), *k, s.as_slice()))
    }
}

/// All learnable tensors of a model, in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    cfg: ModelConfig,
    entries: Vec<Param>,
}

/// Weights ~ N(0, 0.02²) truncated to ±2σ; norm gains 1; shifts and biases 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params, ModelError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let entries = layout
        .specs()
        .map(|(name, kind, shape)| {
            let len: usize = shape.iter().product();
            let data = match kind {
                ParamKind::Weight => (0..len)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * INIT_STD {
                            break x;
                        }
                    })
                    .collect(),
                ParamKind::NormGain => vec![1.0; len],
                ParamKind::Bias | ParamKind::NormShift => vec![0.0; len],
            };
            Param { name: name.to_string(), kind, value: Tensor::new(shape, data).expect("layout shape") }
        })
        .collect();
    Ok(Params { cfg: *cfg, entries })
}

impl Params {
    /// Assembles parameters from named tensors, checking them against the
    /// layout of `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if named.len() != layout.len() {
            return Err(ModelError::LayoutMismatch(format!("{} tensors, layout has {}", named.len(), layout.len())));
        }
        let entries = layout
            .specs()
            .zip(named)
            .map(|((name, kind, shape), (got_name, value))| {
                if name != got_name || value.shape() != shape {
                    return Err(ModelError::LayoutMismatch(format!(
                        "expected {name} {shape:?}, found {got_name} {:?}",
                        value.shape()
                    )));
                }
                if !value.is_finite() {
                    return Err(ModelError::LayoutMismatch(format!("{name} has non-finite values")));
                }
                Ok(Param { name: got_name, kind, value })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { cfg: *cfg, entries })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_scalars() {
            return Err(ModelError::LayoutMismatch(format!("{} values for {} scalars", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Name of the parameter holding flat coordinate `index`.
    pub fn name_of_scalar(&self, index: usize) -> Option<(&str, usize)> {
        let mut off = 0;
        for p in &self.entries {
            if index < off + p.value.len() {
                return Some((&p.name, index - off));
            }
            off += p.value.len();
        }
        None
    }
}
