//! JSONL datasets of labelled DAGs, a synthetic benchmark generator and
//! seeded splits.
//!
//! One record per line:
//!
//! ```json
//! {"nodes":[{"op":3,"attrs":[1.0],"shape":[1,64]},{"op":0,"attrs":[],"shape":[]}],"edges":[[0,1]],"target":2.5}
//! ```
//!
//! Files whose name ends in `.gz`, or that start with the gzip magic bytes,
//! are read and written gzip-compressed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, DagError, NodeDescriptor};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {index}: {message}")]
    Validation { index: usize, message: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("cannot split an empty dataset")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub op: u32,
    #[serde(default)]
    pub attrs: Vec<f64>,
    #[serde(default)]
    pub shape: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagRecord {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[usize; 2]>,
    pub target: f64,
}

impl DagRecord {
    pub fn from_dag(dag: &Dag, target: f64) -> Self {
        let nodes = dag
            .nodes()
            .iter()
            .map(|n| NodeRecord { op: n.op_type, attrs: n.attrs.clone(), shape: n.shape.clone() })
            .collect();
        let edges = dag.edges().into_iter().map(|(s, d)| [s, d]).collect();
        Self { nodes, edges, target }
    }

    pub fn to_dag(&self) -> Result<Dag, DagError> {
        let nodes =
            self.nodes.iter().map(|n| NodeDescriptor::new(n.op, n.attrs.clone(), n.shape.clone())).collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Dag::new(nodes, &edges)
    }

    /// Checks everything `to_dag` checks plus a finite target and a
    /// duplicate-free edge list.
    pub fn validate(&self) -> Result<Dag, String> {
        if !self.target.is_finite() {
            return Err(format!("non-finite target {}", self.target));
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if !seen.insert(*e) {
                return Err(format!("duplicate edge {} -> {}", e[0], e[1]));
            }
        }
        self.to_dag().map_err(|e| e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

fn is_gz_name(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, DatasetError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let magic = file.fill_buf().map_err(io_err(path))?;
    let gz = magic.starts_with(&[0x1f, 0x8b]) || (is_gz_name(path) && magic.is_empty());
    Ok(if gz { Box::new(BufReader::new(MultiGzDecoder::new(file))) } else { Box::new(file) })
}

/// Parses and validates every record. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<DagRecord>, DatasetError> {
    let reader = open_reader(path)?;
    parse_jsonl(reader)
}

pub fn parse_jsonl(reader: impl Read) -> Result<Vec<DagRecord>, DatasetError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DagRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: i + 1, message: e.to_string() })?;
        rec.validate().map_err(|message| DatasetError::Validation { index: records.len(), message })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn save_jsonl(records: &[DagRecord], path: &Path) -> Result<(), DatasetError> {
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|message| DatasetError::Validation { index, message })?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out: Box<dyn Write> = if is_gz_name(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_graphs: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub width_min: usize,
    pub width_max: usize,
    /// Probability of each extra edge between non-adjacent layers.
    pub extra_edge_prob: f64,
    /// Cost of each operation type; op types are drawn from its keys.
    pub op_costs: BTreeMap<u32, f64>,
    /// Weight of off-critical-path work in the target.
    pub beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let costs = [1.0, 2.0, 0.5, 3.0, 1.5, 0.8, 2.5, 1.2];
        Self {
            n_graphs: 1000,
            depth_min: 3,
            depth_max: 12,
            width_min: 1,
            width_max: 4,
            extra_edge_prob: 0.2,
            op_costs: costs.iter().enumerate().map(|(i, &c)| (i as u32, c)).collect(),
            beta: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.n_graphs == 0 {
            return bad("n_graphs must be positive".into());
        }
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return bad(format!("depth range [{}, {}]", self.depth_min, self.depth_max));
        }
        if self.width_min == 0 || self.width_min > self.width_max {
            return bad(format!("width range [{}, {}]", self.width_min, self.width_max));
        }
        if self.depth_max * self.width_max > crate::dag::MAX_NODES {
            return bad(format!("graphs could exceed {} nodes", crate::dag::MAX_NODES));
        }
        if !(0.0..=0.5).contains(&self.extra_edge_prob) {
            return bad(format!("extra_edge_prob {} not in [0, 0.5]", self.extra_edge_prob));
        }
        if self.op_costs.is_empty() {
            return bad("empty op cost table".into());
        }
        if let Some((op, c)) = self.op_costs.iter().find(|(_, c)| !(**c > 0.0 && c.is_finite())) {
            return bad(format!("cost of op {op} is {c}"));
        }
        if let Some(op) = self.op_costs.keys().find(|&&op| op as usize >= crate::dag::NUM_OP_TYPES) {
            return bad(format!("op type {op} out of range"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} not in [0, 1]", self.beta));
        }
        Ok(())
    }
}

/// Largest total node cost over all source-to-sink paths, by dynamic
/// programming in topological order.
pub fn critical_path_cost(dag: &Dag, cost: &[f64]) -> f64 {
    let mut best = vec![0.0f64; dag.len()];
    for &v in dag.topological_order() {
        let from_parents = dag.parents(v).map(|p| best[p]).fold(0.0, f64::max);
        best[v] = from_parents + cost[v];
    }
    best.into_iter().fold(0.0, f64::max)
}

/// `C_crit + beta · (C_total - C_crit)`: parallel branches are discounted.
pub fn latency_target(dag: &Dag, cost: &[f64], beta: f64) -> f64 {
    let total: f64 = cost.iter().sum();
    let crit = critical_path_cost(dag, cost);
    crit + beta * (total - crit)
}

/// Layered random DAGs with targets from [`latency_target`].
///
/// Each graph has `D` layers of random width. Every node past the first
/// layer gets one parent drawn from the layer before it; each pair of
/// nodes in non-adjacent layers is joined with probability
/// `extra_edge_prob`. Nodes are numbered layer by layer.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<DagRecord>, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::substream(cfg.seed, crate::seed::DATA));
    let ops: Vec<u32> = cfg.op_costs.keys().copied().collect();
    let mut out = Vec::with_capacity(cfg.n_graphs);
    for _ in 0..cfg.n_graphs {
        let depth = rng.gen_range(cfg.depth_min..=cfg.depth_max);
        let mut layers: Vec<std::ops::Range<usize>> = Vec::with_capacity(depth);
        let mut n = 0;
        for _ in 0..depth {
            let w = rng.gen_range(cfg.width_min..=cfg.width_max);
            layers.push(n..n + w);
            n += w;
        }
        let mut edges = Vec::new();
        for l in 1..depth {
            for v in layers[l].clone() {
                edges.push((rng.gen_range(layers[l - 1].clone()), v));
            }
        }
        for l in 2..depth {
            for v in layers[l].clone() {
                for u in layers[0].start..layers[l - 2].end {
                    if rng.gen_bool(cfg.extra_edge_prob) {
                        edges.push((u, v));
                    }
                }
            }
        }
        let node_ops: Vec<u32> = (0..n).map(|_| ops[rng.gen_range(0..ops.len())]).collect();
        let dag = Dag::new(node_ops.iter().map(|&op| NodeDescriptor::op(op)).collect(), &edges)
            .expect("layered construction is acyclic");
        let cost: Vec<f64> = node_ops.iter().map(|op| cfg.op_costs[op]).collect();
        out.push(DagRecord::from_dag(&dag, latency_target(&dag, &cost, cfg.beta)));
    }
    Ok(out)
}

/// Random DAG on `n` nodes in topological index order: each forward pair
/// `(i, j)` is an edge with probability `edge_prob`; op types are uniform in
/// `0..n_ops`.
pub fn random_dag(rng: &mut impl Rng, n: usize, edge_prob: f64, n_ops: u32) -> Dag {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let nodes = (0..n).map(|_| NodeDescriptor::op(rng.gen_range(0..n_ops.max(1)))).collect();
    Dag::new(nodes, &edges).expect("forward edges are acyclic")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then contiguous slices of `round(n · fraction)` items.
pub fn split<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<Split<T>, DatasetError> {
    if items.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-12 {
        return Err(DatasetError::InvalidFractions(format!("({a}, {b}, {c})")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let n_test = ((n as f64 * c).round() as usize).min(n - n_train - n_val);
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n_train + n_val + n_test),
    })
}
