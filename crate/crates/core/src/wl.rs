//! Weisfeiler-Lehman colour refinement on DAGs.
//!
//! The directed variant refines a node's colour from its old colour together
//! with the multiset of colours of its children and, separately, the
//! multiset of colours of its parents. The undirected variant symmetrizes the
//! adjacency first and only sees one neighbour multiset.
//!
//! Colours are canonicalized every round: all signatures of the round are
//! sorted and deduplicated and a colour is the rank of its signature. This is
//! injective within a round and independent of node numbering, so colour
//! ids are comparable between graphs refined in the same call.

use crate::dag::Dag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WlMode {
    Directed,
    Undirected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlColors {
    /// Colour of each node after the last round.
    pub colors: Vec<u32>,
    /// Sorted colour multiset.
    pub multiset: Vec<u32>,
    /// Rounds actually performed before stabilization.
    pub rounds: usize,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Signature {
    old: u32,
    fwd: Vec<u32>,
    bwd: Vec<u32>,
}

/// Refines several graphs jointly so that their colours share one dictionary.
pub fn refine_joint(graphs: &[&Dag], iters: usize, mode: WlMode) -> Vec<WlColors> {
    let neighbors: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)> = graphs
        .iter()
        .map(|g| {
            let n = g.len();
            let mut fwd = vec![Vec::new(); n];
            let mut bwd = vec![Vec::new(); n];
            for (s, d) in g.edges() {
                match mode {
                    WlMode::Directed => {
                        fwd[s].push(d);
                        bwd[d].push(s);
                    }
                    WlMode::Undirected => {
                        fwd[s].push(d);
                        fwd[d].push(s);
                    }
                }
            }
            (fwd, bwd)
        })
        .collect();

    let mut colors: Vec<Vec<u32>> = canonicalize(
        graphs.iter().map(|g| g.nodes().iter().map(|d| d.op_type).collect::<Vec<_>>()).collect(),
    );
    let mut classes = distinct(&colors);
    let mut rounds = 0;
    for _ in 0..iters {
        let sigs: Vec<Vec<Signature>> = colors
            .iter()
            .zip(&neighbors)
            .map(|(cols, (fwd, bwd))| {
                (0..cols.len())
                    .map(|v| {
                        let gather = |ns: &[usize]| {
                            let mut c: Vec<u32> = ns.iter().map(|&u| cols[u]).collect();
                            c.sort_unstable();
                            c
                        };
                        Signature { old: cols[v], fwd: gather(&fwd[v]), bwd: gather(&bwd[v]) }
                    })
                    .collect()
            })
            .collect();
        let next = canonicalize(sigs);
        let next_classes = distinct(&next);
        rounds += 1;
        colors = next;
        if next_classes == classes {
            break;
        }
        classes = next_classes;
    }

    colors
        .into_iter()
        .map(|c| {
            let mut multiset = c.clone();
            multiset.sort_unstable();
            WlColors { colors: c, multiset, rounds }
        })
        .collect()
}

fn canonicalize<T: Ord + Clone>(items: Vec<Vec<T>>) -> Vec<Vec<u32>> {
    let mut dict: Vec<T> = items.iter().flatten().cloned().collect();
    dict.sort();
    dict.dedup();
    items
        .into_iter()
        .map(|g| g.into_iter().map(|s| dict.binary_search(&s).unwrap() as u32).collect())
        .collect()
}

fn distinct(colors: &[Vec<u32>]) -> usize {
    let mut all: Vec<u32> = colors.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all.len()
}

/// Directed refinement of one graph; stops early once the partition is stable.
pub fn wl_refine_directed(dag: &Dag, iters: usize) -> WlColors {
    refine_joint(&[dag], iters, WlMode::Directed).pop().unwrap()
}

pub fn wl_refine_undirected(dag: &Dag, iters: usize) -> WlColors {
    refine_joint(&[dag], iters, WlMode::Undirected).pop().unwrap()
}

/// True iff directed refinement separates the two graphs' colour multisets.
pub fn wl_distinguishes(a: &Dag, b: &Dag, iters: usize) -> bool {
    distinguishes_with(a, b, iters, WlMode::Directed)
}

pub fn distinguishes_with(a: &Dag, b: &Dag, iters: usize, mode: WlMode) -> bool {
    if a.len() != b.len() {
        return true;
    }
    let res = refine_joint(&[a, b], iters, mode);
    res[0].multiset != res[1].multiset
}
