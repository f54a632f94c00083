//! Directed acyclic graphs of operations and the boolean mask algebra built
//! on top of their adjacency matrix.
//!
//! Edge convention: `adj[i][j] == true` means a directed edge `i -> j`.
//! Under this convention the boolean product `A·Aᵀ` marks pairs of nodes
//! that share a child and `Aᵀ·A` marks pairs that share a parent.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest graph accepted by [`Dag::new`].
pub const MAX_NODES: usize = 4096;
/// Number of distinct operation type ids.
pub const NUM_OP_TYPES: usize = 32;
/// Maximum number of real-valued attributes per node.
pub const MAX_ATTRS: usize = 8;
/// Maximum rank of a node's output shape.
pub const MAX_SHAPE_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("cycle detected through nodes {0:?}")]
    CycleDetected(Vec<usize>),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("graph has {0} nodes, limit is {MAX_NODES}")]
    TooLarge(usize),
    #[error("graph must contain at least one node")]
    Empty,
    #[error("invalid descriptor for node {node}: {reason}")]
    InvalidNode { node: usize, reason: String },
    #[error("edge ({0}, {1}) references a node out of range")]
    EdgeOutOfRange(usize, usize),
    #[error("unknown mask variant `{0}`")]
    UnknownVariant(String),
}

/// Raw content of one operation node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDescriptor {
    pub op_type: u32,
    pub attrs: Vec<f64>,
    pub shape: Vec<u64>,
}

impl NodeDescriptor {
    pub fn new(op_type: u32, attrs: Vec<f64>, shape: Vec<u64>) -> Self {
        Self { op_type, attrs, shape }
    }

    /// Descriptor with an op type and nothing else.
    pub fn op(op_type: u32) -> Self {
        Self::new(op_type, Vec::new(), Vec::new())
    }

    pub fn check(&self) -> Result<(), String> {
        if self.op_type as usize >= NUM_OP_TYPES {
            return Err(format!("op_type {} >= {NUM_OP_TYPES}", self.op_type));
        }
        if self.attrs.len() > MAX_ATTRS {
            return Err(format!("{} attributes, limit is {MAX_ATTRS}", self.attrs.len()));
        }
        if self.attrs.iter().any(|a| !a.is_finite()) {
            return Err("non-finite attribute".into());
        }
        if self.shape.len() > MAX_SHAPE_RANK {
            return Err(format!("shape rank {}, limit is {MAX_SHAPE_RANK}", self.shape.len()));
        }
        Ok(())
    }
}

/// Dense square boolean matrix stored as one bitset per row.
#[derive(Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BoolMatrix {
    pub fn zeros(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self { n, words, bits: vec![0; n * words] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn ones(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, DagError> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(DagError::ShapeMismatch(format!(
                    "row {i} has length {}, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.bits[i * self.words + j / 64] >> (j % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        let w = &mut self.bits[i * self.words + j / 64];
        if v {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// Column indices set in row `i`, ascending.
    pub fn row_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(i).iter().enumerate().flat_map(|(w, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let b = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(w * 64 + b)
            })
        })
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in self.row_indices(i) {
                t.set(j, i, true);
            }
        }
        t
    }

    /// Boolean product: `(self·rhs)[i][j]` is true iff some `k` has
    /// `self[i][k] && rhs[k][j]`.
    pub fn bool_product(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n, "bool_product size mismatch");
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            let base = i * out.words;
            for k in self.row_indices(i) {
                for (dst, src) in out.bits[base..base + out.words].iter_mut().zip(rhs.row_words(k)) {
                    *dst |= *src;
                }
            }
        }
        out
    }

    pub fn or(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n, "or size mismatch");
        let bits = self.bits.iter().zip(&rhs.bits).map(|(a, b)| a | b).collect();
        Self { n: self.n, words: self.words, bits }
    }

    /// `I + self`, booleanized.
    pub fn with_identity(&self) -> Self {
        let mut m = self.clone();
        for i in 0..self.n {
            m.set(i, i, true);
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row_indices(i).all(|j| self.get(j, i)))
    }

    /// Copy embedded in an `(n + 1)`-sized matrix whose extra last row and
    /// column are filled with `fill`.
    pub fn extended(&self, fill: bool) -> Self {
        let n = self.n + 1;
        let mut m = Self::zeros(n);
        for i in 0..self.n {
            for j in self.row_indices(i) {
                m.set(i, j, true);
            }
        }
        for k in 0..n {
            m.set(k, n - 1, fill);
            m.set(n - 1, k, fill);
        }
        m
    }

    /// Row-major dense copy with `1.0` where set.
    pub fn to_f64(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in self.row_indices(i) {
                out[i * self.n + j] = 1.0;
            }
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }
}

impl fmt::Debug for BoolMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BoolMatrix({})", self.n)?;
        for i in 0..self.n {
            let row: String = (0..self.n).map(|j| if self.get(i, j) { '1' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// A validated DAG of operations. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    adj: BoolMatrix,
    nodes: Vec<NodeDescriptor>,
    topo: Vec<usize>,
}

impl Dag {
    /// Builds a graph from node descriptors and an edge list, validating it.
    /// Duplicate edges collapse to one.
    pub fn new(nodes: Vec<NodeDescriptor>, edges: &[(usize, usize)]) -> Result<Self, DagError> {
        let n = nodes.len();
        if n > MAX_NODES {
            return Err(DagError::TooLarge(n));
        }
        let mut adj = BoolMatrix::zeros(n);
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(DagError::EdgeOutOfRange(s, d));
            }
            adj.set(s, d, true);
        }
        Self::from_adjacency(adj, nodes)
    }

    pub fn from_adjacency(adj: BoolMatrix, nodes: Vec<NodeDescriptor>) -> Result<Self, DagError> {
        let topo = validate(&adj, &nodes)?;
        Ok(Self { adj, nodes, topo })
    }

    /// Graph whose nodes all carry op type 0.
    pub fn unlabeled(n: usize, edges: &[(usize, usize)]) -> Result<Self, DagError> {
        Self::new(vec![NodeDescriptor::op(0); n], edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn adjacency(&self) -> &BoolMatrix {
        &self.adj
    }

    pub fn nodes(&self) -> &[NodeDescriptor] {
        &self.nodes
    }

    /// A topological order, smallest ready index first.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.adj.get(src, dst)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.len()).flat_map(|i| self.adj.row_indices(i).map(move |j| (i, j))).collect()
    }

    pub fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj.row_indices(v)
    }

    pub fn parents(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&u| self.adj.get(u, v))
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DagError> {
        let n = self.len();
        if perm.len() != n {
            return Err(DagError::ShapeMismatch(format!("permutation of length {} for {n} nodes", perm.len())));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(DagError::ShapeMismatch("not a permutation".into()));
            }
        }
        let mut nodes = vec![NodeDescriptor::op(0); n];
        for (i, node) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = node.clone();
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(s, d)| (perm[s], perm[d])).collect();
        Self::new(nodes, &edges)
    }
}

/// Checks that `adj` describes an acyclic graph over `nodes` without
/// self-loops and returns a topological order.
pub fn validate(adj: &BoolMatrix, nodes: &[NodeDescriptor]) -> Result<Vec<usize>, DagError> {
    let n = adj.size();
    if n != nodes.len() {
        return Err(DagError::ShapeMismatch(format!("adjacency is {n}x{n} but there are {} nodes", nodes.len())));
    }
    if n == 0 {
        return Err(DagError::Empty);
    }
    if n > MAX_NODES {
        return Err(DagError::TooLarge(n));
    }
    for (i, node) in nodes.iter().enumerate() {
        node.check().map_err(|reason| DagError::InvalidNode { node: i, reason })?;
    }
    if let Some(i) = (0..n).find(|&i| adj.get(i, i)) {
        return Err(DagError::SelfLoop(i));
    }
    if let Some(cycle) = find_cycle(adj) {
        return Err(DagError::CycleDetected(cycle));
    }

    let mut indeg: Vec<usize> = vec![0; n];
    for i in 0..n {
        for j in adj.row_indices(i) {
            indeg[j] += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for c in adj.row_indices(v) {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert(c);
            }
        }
    }
    debug_assert_eq!(order.len(), n);
    Ok(order)
}

/// Iterative DFS; returns the node ids of one directed cycle in path order.
fn find_cycle(adj: &BoolMatrix) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Gray,
        Black,
    }
    let n = adj.size();
    let mut mark = vec![Mark::White; n];
    let children: Vec<Vec<usize>> = (0..n).map(|i| adj.row_indices(i).collect()).collect();
    for root in 0..n {
        if mark[root] != Mark::White {
            continue;
        }
        // (node, next child cursor)
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Gray;
        while let Some(&mut (v, ref mut cursor)) = stack.last_mut() {
            if let Some(&c) = children[v].get(*cursor) {
                *cursor += 1;
                match mark[c] {
                    Mark::White => {
                        mark[c] = Mark::Gray;
                        stack.push((c, 0));
                    }
                    Mark::Gray => {
                        let start = stack.iter().position(|&(u, _)| u == c).unwrap();
                        return Some(stack[start..].iter().map(|&(u, _)| u).collect());
                    }
                    Mark::Black => {}
                }
            } else {
                mark[v] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

/// Pairs of nodes sharing a child and pairs sharing a parent.
#[derive(Debug, Clone, PartialEq)]
pub struct SiblingMasks {
    /// `[k][j]` set iff some `v` has edges `k -> v` and `j -> v` (bool of `A·Aᵀ`).
    pub common_child: BoolMatrix,
    /// `[k][j]` set iff some `v` has edges `v -> k` and `v -> j` (bool of `Aᵀ·A`).
    pub common_parent: BoolMatrix,
}

pub fn sibling_masks(dag: &Dag) -> SiblingMasks {
    let a = dag.adjacency();
    let at = a.transpose();
    SiblingMasks { common_child: a.bool_product(&at), common_parent: at.bool_product(a) }
}

/// What a single attention-head mask encodes. Every kind includes the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// `I + A`
    SelfFwd,
    /// `I + Aᵀ`
    SelfBwd,
    /// `I + A·Aᵀ`
    SelfCommonChild,
    /// `I + Aᵀ·A`
    SelfCommonParent,
    /// all ones
    Global,
    /// `I + A²`
    TwoHopFwd,
    /// `I + (Aᵀ)²`
    TwoHopBwd,
}

/// Which masks the four attention heads receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum MaskVariant {
    /// `[I+A, I+Aᵀ, I+AᵀA, I+AAᵀ]`
    #[default]
    AsmaDefault,
    FwdOnly,
    BwdOnly,
    FwdBwd,
    TwoHop,
    GlobalAll,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 6] = [
        MaskVariant::AsmaDefault,
        MaskVariant::FwdOnly,
        MaskVariant::BwdOnly,
        MaskVariant::FwdBwd,
        MaskVariant::TwoHop,
        MaskVariant::GlobalAll,
    ];

    pub fn kinds(self) -> [MaskKind; 4] {
        use MaskKind::*;
        match self {
            MaskVariant::AsmaDefault => [SelfFwd, SelfBwd, SelfCommonParent, SelfCommonChild],
            MaskVariant::FwdOnly => [SelfFwd; 4],
            MaskVariant::BwdOnly => [SelfBwd; 4],
            MaskVariant::FwdBwd => [SelfFwd, SelfFwd, SelfBwd, SelfBwd],
            MaskVariant::TwoHop => [SelfFwd, SelfBwd, TwoHopFwd, TwoHopBwd],
            MaskVariant::GlobalAll => [Global; 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::AsmaDefault => "AsmaDefault",
            MaskVariant::FwdOnly => "FwdOnly",
            MaskVariant::BwdOnly => "BwdOnly",
            MaskVariant::FwdBwd => "FwdBwd",
            MaskVariant::TwoHop => "TwoHop",
            MaskVariant::GlobalAll => "GlobalAll",
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskVariant {
    type Err = DagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MaskVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DagError::UnknownVariant(s.to_string()))
    }
}

/// One boolean mask per attention head, each with a full diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<BoolMatrix>,
    labels: Vec<MaskKind>,
}

impl MaskSet {
    pub fn masks(&self) -> &[BoolMatrix] {
        &self.masks
    }

    pub fn labels(&self) -> &[MaskKind] {
        &self.labels
    }

    pub fn heads(&self) -> usize {
        self.masks.len()
    }

    /// Appends a virtual node that attends to, and is attended by, every node
    /// in every head.
    pub fn with_global_token(&self) -> Self {
        Self { masks: self.masks.iter().map(|m| m.extended(true)).collect(), labels: self.labels.clone() }
    }
}

pub fn mask_for_kind(dag: &Dag, kind: MaskKind) -> BoolMatrix {
    let a = dag.adjacency();
    let m = match kind {
        MaskKind::SelfFwd => a.clone(),
        MaskKind::SelfBwd => a.transpose(),
        MaskKind::SelfCommonChild => a.bool_product(&a.transpose()),
        MaskKind::SelfCommonParent => a.transpose().bool_product(a),
        MaskKind::Global => return BoolMatrix::ones(dag.len()),
        MaskKind::TwoHopFwd => a.bool_product(a),
        MaskKind::TwoHopBwd => {
            let at = a.transpose();
            at.bool_product(&at)
        }
    };
    m.with_identity()
}

pub fn build_mask_set(dag: &Dag, variant: MaskVariant) -> MaskSet {
    let labels = variant.kinds().to_vec();
    let masks = labels.iter().map(|&k| mask_for_kind(dag, k)).collect();
    MaskSet { masks, labels }
}
