use super::params::{BlockIdx, GraphOp, HeadIdx, Layout, NormIdx};
use super::{FfnVariant, ModelConfig, ModelError, Params, Readout};
use crate::autodiff::{Segment, Tape, Tensor, Var};
use crate::dag::{build_mask_set, BoolMatrix, Dag, MaskSet};
use crate::encoding::encode_graph;
use crate::seed::splitmix64;

/// Everything the forward pass needs from a graph, computed once and reused
/// across epochs.
#[derive(Debug, Clone)]
pub struct GraphInput {
    /// Real nodes, excluding any class token.
    pub nodes: usize,
    /// `nodes × input_dim` encoded features.
    pub features: Tensor,
    /// One mask per head; includes the class-token row and column when the
    /// readout uses one.
    pub masks: MaskSet,
    /// Dense operators used by the feed-forward graph aggregation. Class-token
    /// rows and columns are zero.
    pub operators: Vec<(GraphOp, Tensor)>,
}

impl GraphInput {
    pub fn new(dag: &Dag, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let nodes = dag.len();
        let features = Tensor::matrix(nodes, cfg.input_dim(), encode_graph(dag, &cfg.encoding)?)?;
        let token = cfg.readout == Readout::ClassToken;
        let mut masks = build_mask_set(dag, cfg.mask_variant);
        if token {
            masks = masks.with_global_token();
        }
        let layout_ops: &[GraphOp] = match cfg.ffn_variant {
            FfnVariant::BgiDefault | FfnVariant::MultiplyCombine => &[GraphOp::Fwd, GraphOp::Bwd],
            FfnVariant::FwdOnlySplit => &[GraphOp::Fwd],
            FfnVariant::BwdOnlySplit => &[GraphOp::Bwd],
            FfnVariant::FourSplit => &[GraphOp::Fwd, GraphOp::Bwd, GraphOp::CommonParent, GraphOp::CommonChild],
            FfnVariant::SymmetricLaplacian => &[GraphOp::SymNorm],
            FfnVariant::PlainFfn => &[],
        };
        let operators = layout_ops
            .iter()
            .map(|&op| {
                let m = graph_operator(dag, op);
                let m = if token { pad_operator(&m, nodes) } else { m };
                (op, m)
            })
            .collect();
        Ok(Self { nodes, features, masks, operators })
    }

    /// Rows of the hidden state: nodes plus the class token if present.
    pub fn rows(&self) -> usize {
        self.masks.masks()[0].size()
    }

    fn operator(&self, op: GraphOp) -> &Tensor {
        &self.operators.iter().find(|(o, _)| *o == op).expect("operator prepared for variant").1
    }
}

/// Dense `n × n` aggregation matrix for one graph operator.
///
/// `Fwd` is the raw adjacency, so row `v` of `A·H` sums the features of
/// `v`'s children. Sibling operators are the booleanized products without
/// the diagonal. `SymNorm` is `D^-1/2 (A + Aᵀ) D^-1/2` with `D` the
/// undirected degree; isolated nodes get a zero row.
pub fn graph_operator(dag: &Dag, op: GraphOp) -> Tensor {
    let n = dag.len();
    let a = dag.adjacency();
    let without_diag = |m: BoolMatrix| {
        let mut v = m.to_f64();
        for i in 0..n {
            v[i * n + i] = 0.0;
        }
        v
    };
    let data = match op {
        GraphOp::Fwd => a.to_f64(),
        GraphOp::Bwd => a.transpose().to_f64(),
        GraphOp::CommonParent => without_diag(a.transpose().bool_product(a)),
        GraphOp::CommonChild => without_diag(a.bool_product(&a.transpose())),
        GraphOp::SymNorm => {
            let sym = a.or(&a.transpose());
            let deg: Vec<f64> = (0..n).map(|i| sym.row_count(i) as f64).collect();
            let mut v = sym.to_f64();
            for i in 0..n {
                for j in 0..n {
                    if v[i * n + j] != 0.0 {
                        v[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
                    }
                }
            }
            v
        }
    };
    Tensor::matrix(n, n, data).expect("square operator")
}

fn pad_operator(m: &Tensor, n: usize) -> Tensor {
    let mut out = vec![0.0; (n + 1) * (n + 1)];
    for i in 0..n {
        out[i * (n + 1)..i * (n + 1) + n].copy_from_slice(m.row(i));
    }
    Tensor::matrix(n + 1, n + 1, out).expect("padded operator")
}

/// Training flag and dropout seed for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub train: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Several prepared graphs stacked into one block-diagonal problem.
///
/// Hidden-state rows are laid out graph after graph; graph `g` owns rows
/// `segments[g]`, nodes first and then its class token if the readout uses
/// one. Attention and graph aggregation never cross segment boundaries, so
/// each graph's result is the same as when it is processed alone.
#[derive(Debug)]
pub struct Batch<'g> {
    graphs: Vec<&'g GraphInput>,
    features: Tensor,
    segments: Vec<Segment>,
}

impl<'g> Batch<'g> {
    pub fn new(graphs: Vec<&'g GraphInput>) -> Result<Self, ModelError> {
        let Some(first) = graphs.first() else {
            return Err(ModelError::InvalidConfig("empty batch".into()));
        };
        let width = first.features.cols();
        let mut data = Vec::with_capacity(graphs.iter().map(|g| g.features.len()).sum());
        let mut segments = Vec::with_capacity(graphs.len());
        let mut start = 0;
        for g in &graphs {
            if g.features.cols() != width {
                return Err(ModelError::InvalidConfig("graphs in a batch use different encodings".into()));
            }
            data.extend_from_slice(g.features.data());
            segments.push(Segment { start, len: g.rows() });
            start += g.rows();
        }
        let nodes = data.len() / width;
        Ok(Self { features: Tensor::matrix(nodes, width, data)?, graphs, segments })
    }

    pub fn single(graph: &'g GraphInput) -> Result<Self, ModelError> {
        Self::new(vec![graph])
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Total hidden-state rows.
    pub fn rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    fn operator_blocks(&self, op: GraphOp) -> Vec<(usize, &'g Tensor)> {
        self.graphs.iter().zip(&self.segments).map(|(g, s)| (s.start, g.operator(op))).collect()
    }
}

/// One forward pass recorded on a tape.
///
/// Parameters are registered as borrowed leaves in layout order, so after
/// `backward` the gradient of parameter `i` is `tape.grad(leaves[i])`.
pub struct Forward<'t, 'a> {
    pub tape: &'t mut Tape<'a>,
    pub leaves: Vec<Var>,
    layout: Layout,
    cfg: ModelConfig,
    mode: Mode,
    dropout_site: u64,
}

impl<'t, 'a> Forward<'t, 'a> {
    pub fn new(tape: &'t mut Tape<'a>, params: &'a Params, mode: Mode) -> Result<Self, ModelError> {
        let cfg = *params.config();
        let leaves = params.entries().iter().map(|p| tape.leaf_ref(&p.value)).collect::<Result<_, _>>()?;
        Ok(Self { tape, leaves, layout: Layout::new(&cfg), cfg, mode, dropout_site: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn p(&self, idx: usize) -> Var {
        self.leaves[idx]
    }

    fn next_seed(&mut self) -> u64 {
        self.dropout_site += 1;
        splitmix64(self.mode.seed ^ splitmix64(self.dropout_site))
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let seed = self.next_seed();
        Ok(self.tape.dropout(x, self.cfg.dropout, self.mode.train, seed)?)
    }

    fn norm(&mut self, x: Var, idx: NormIdx) -> Result<Var, ModelError> {
        let (g, b) = (self.p(idx.gain), self.p(idx.shift));
        Ok(self.tape.layer_norm(x, g, b, self.cfg.ln_eps)?)
    }

    fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Result<Var, ModelError> {
        let y = self.tape.matmul(x, self.p(w))?;
        Ok(match b {
            Some(b) => self.tape.add_row(y, self.p(b))?,
            None => y,
        })
    }

    /// `H⁰ = LN(Z·W + b)`, with each graph's class token placed after its
    /// nodes when the readout uses one.
    pub fn embed(&mut self, batch: &'a Batch<'a>) -> Result<Var, ModelError> {
        let z = self.tape.constant_ref(&batch.features)?;
        let x = self.linear(z, self.layout.input_w, Some(self.layout.input_b))?;
        let h = self.norm(x, self.layout.input_norm)?;
        let Some(t) = self.layout.class_token else {
            return Ok(h);
        };
        let token_row = batch.features.rows();
        let with_token = self.tape.concat_rows(&[h, self.p(t)])?;
        let mut index = Vec::with_capacity(batch.rows());
        let mut node = 0;
        for g in &batch.graphs {
            index.extend(node..node + g.nodes);
            index.push(token_row);
            node += g.nodes;
        }
        Ok(self.tape.gather_rows(with_token, index)?)
    }

    /// Masked multi-head attention: head `i` of a graph attends only where
    /// that graph's mask `i` is set.
    pub fn attention(&mut self, h: Var, batch: &'a Batch<'a>, block: usize) -> Result<Var, ModelError> {
        let b: BlockIdx = self.layout.blocks[block].clone();
        let masks: Vec<&[BoolMatrix]> = batch.graphs.iter().map(|g| g.masks.masks()).collect();
        if masks.iter().any(|m| m.len() != b.query.len()) {
            return Err(ModelError::InvalidConfig(format!("mask count differs from {} heads", b.query.len())));
        }
        let w: Vec<Var> = [&b.query, &b.key, &b.value].into_iter().flatten().map(|&i| self.p(i)).collect();
        let w = self.tape.concat_cols_many(&w)?;
        let qkv = self.tape.matmul(h, w)?;
        let scale = (self.cfg.head_dim() as f64).sqrt();
        let seed = self.next_seed();
        let (p, train) = (self.cfg.dropout, self.mode.train);
        let heads = b.query.len();
        let cat = self.tape.segment_attention(qkv, heads, batch.segments.clone(), &masks, scale, p, train, seed)?;
        self.linear(cat, b.out, None)
    }

    /// Feed-forward layer with graph aggregation, per the configured variant.
    pub fn feed_forward(&mut self, h: Var, batch: &'a Batch<'a>, block: usize) -> Result<Var, ModelError> {
        let b: BlockIdx = self.layout.blocks[block].clone();
        let local = self.linear(h, b.w1, Some(b.b1))?;
        let mixed = if b.graph.is_empty() {
            local
        } else {
            let mut parts = Vec::with_capacity(b.graph.len());
            for &(op, w) in &b.graph {
                let agg = self.tape.block_diag_matmul(batch.operator_blocks(op), h)?;
                parts.push(self.linear(agg, w, None)?);
            }
            let hg = if parts.len() == 1 { parts[0] } else { self.tape.concat_cols_many(&parts)? };
            match self.cfg.ffn_variant {
                FfnVariant::MultiplyCombine => self.tape.hadamard(local, hg)?,
                _ => self.tape.add(local, hg)?,
            }
        };
        let act = self.tape.relu(mixed)?;
        self.linear(act, b.w2, Some(b.b2))
    }

    /// Pre-norm residual block: `Ĥ = Attn(LN(H)) + H`, `H' = FFN(LN(Ĥ)) + Ĥ`.
    pub fn block(&mut self, h: Var, batch: &'a Batch<'a>, block: usize) -> Result<Var, ModelError> {
        let b = self.layout.blocks[block].clone();
        let x = self.norm(h, b.norm_attn)?;
        let a = self.attention(x, batch, block)?;
        let a = self.dropout(a)?;
        let h = self.tape.add(a, h)?;
        let x = self.norm(h, b.norm_ffn)?;
        let f = self.feed_forward(x, batch, block)?;
        let f = self.dropout(f)?;
        Ok(self.tape.add(f, h)?)
    }

    /// One scalar per graph (a `B×1` tensor) from the final hidden state.
    pub fn readout(&mut self, h: Var, batch: &Batch) -> Result<Var, ModelError> {
        match self.layout.head.clone() {
            HeadIdx::Linear { w, b } => {
                let tokens = batch.segments.iter().map(|s| s.start + s.len - 1).collect();
                let t = self.tape.gather_rows(h, tokens)?;
                self.linear(t, w, Some(b))
            }
            HeadIdx::Mlp { w1, b1, w2, b2 } => {
                let pooled = self.tape.segment_sum(h, batch.segments.clone())?;
                let x = self.linear(pooled, w1, Some(b1))?;
                let x = self.tape.relu(x)?;
                self.linear(x, w2, Some(b2))
            }
        }
    }

    /// Hidden state after every block, before the readout.
    pub fn encode(&mut self, batch: &'a Batch<'a>) -> Result<Var, ModelError> {
        let mut h = self.embed(batch)?;
        for l in 0..self.cfg.blocks {
            h = self.block(h, batch, l)?;
        }
        Ok(h)
    }

    pub fn predict(&mut self, batch: &'a Batch<'a>) -> Result<Var, ModelError> {
        let h = self.encode(batch)?;
        self.readout(h, batch)
    }
}

/// Predictions for a batch, one per graph in batch order.
pub fn predict_batch(batch: &Batch, params: &Params, mode: Mode) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, mode)?;
    let y = fwd.predict(batch)?;
    Ok(tape.value(y).data().to_vec())
}

/// Scalar prediction for an already-prepared graph.
pub fn predict_prepared(graph: &GraphInput, params: &Params, mode: Mode) -> Result<f64, ModelError> {
    Ok(predict_batch(&Batch::single(graph)?, params, mode)?[0])
}

/// Evaluation-mode predictions for many graphs, `chunk` graphs per pass.
pub fn predict_many(graphs: &[GraphInput], params: &Params, chunk: usize) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(graphs.len());
    for part in graphs.chunks(chunk.max(1)) {
        out.extend(predict_batch(&Batch::new(part.iter().collect())?, params, Mode::EVAL)?);
    }
    Ok(out)
}

/// Scalar prediction `f(G)` in the model's output space.
pub fn model_forward(dag: &Dag, params: &Params, train: bool) -> Result<f64, ModelError> {
    let graph = GraphInput::new(dag, params.config())?;
    let mode = if train { Mode::train(0) } else { Mode::EVAL };
    predict_prepared(&graph, params, mode)
}

/// Mean squared error over a batch, with the gradient of every parameter
/// in layout order added into `grads`.
pub fn loss_and_grad(
    batch: &Batch,
    targets: &[f64],
    params: &Params,
    mode: Mode,
    grads: &mut [Tensor],
) -> Result<f64, ModelError> {
    if targets.len() != batch.len() {
        return Err(ModelError::InvalidConfig(format!("{} targets for {} graphs", targets.len(), batch.len())));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, mode)?;
    let y = fwd.predict(batch)?;
    let leaves = std::mem::take(&mut fwd.leaves);
    let t = tape.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?)?;
    let loss = tape.mse_loss(y, t)?;
    tape.backward(loss)?;
    for (g, v) in grads.iter_mut().zip(leaves) {
        if let Some(d) = tape.grad(v) {
            for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
    }
    Ok(tape.value(loss).item()?)
}
