//! Ranking and error metrics: Kendall's tau, MAPE and error-bound accuracy.

use std::collections::BTreeMap;

use serde::ser::{Serialize, SerializeMap, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions, {gt} ground-truth values")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("every pair is tied in at least one list; tau is undefined")]
    AllTied,
    #[error("ground truth at index {index} is {value}, must be > 0")]
    NonPositiveGroundTruth { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("delta must be > 0, got {0}")]
    InvalidDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieMode {
    /// `(C - D) / sqrt((C + D + T_pred)(C + D + T_gt))`
    #[default]
    TauB,
    /// `(C - D) / (n(n-1)/2)`, ties ignored.
    TauA,
}

fn check(pred: &[f64], gt: &[f64]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if let Some(i) = pred.iter().chain(gt).position(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(i % pred.len().max(1)));
    }
    Ok(())
}

fn check_positive(gt: &[f64]) -> Result<(), MetricError> {
    match gt.iter().position(|&g| g <= 0.0) {
        Some(index) => Err(MetricError::NonPositiveGroundTruth { index, value: gt[index] }),
        None => Ok(()),
    }
}

/// Tau-b rank correlation.
pub fn kendall_tau(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    kendall_tau_with(pred, gt, TieMode::TauB)
}

/// Pair counts for Kendall's tau in O(n log n): sort by (pred, gt), then
/// count inversions of `gt` with a merge sort.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairCounts {
    concordant: u64,
    discordant: u64,
    /// Pairs tied in pred only.
    tied_pred: u64,
    /// Pairs tied in gt only.
    tied_gt: u64,
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

fn count_pairs(pred: &[f64], gt: &[f64]) -> PairCounts {
    let n = pred.len() as u64;
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(gt[a].total_cmp(&gt[b])));

    // Pairs tied in pred, and tied in both.
    let (mut t_pred, mut t_both) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && pred[idx[j]] == pred[idx[i]] {
            j += 1;
        }
        let run = (j - i) as u64;
        t_pred += run * (run - 1) / 2;
        let ys: Vec<f64> = idx[i..j].iter().map(|&k| gt[k]).collect();
        t_both += tied_pairs(&ys);
        i = j;
    }

    let mut ys: Vec<f64> = idx.iter().map(|&k| gt[k]).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let t_gt = tied_pairs(&ys);

    let total = n * n.saturating_sub(1) / 2;
    let discordant = swaps;
    let concordant = total + t_both - t_pred - t_gt - discordant;
    PairCounts { concordant, discordant, tied_pred: t_pred - t_both, tied_gt: t_gt - t_both }
}

/// Sorts `v` and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn kendall_tau_with(pred: &[f64], gt: &[f64], mode: TieMode) -> Result<f64, MetricError> {
    check(pred, gt)?;
    if pred.len() < 2 {
        return Err(MetricError::TooFewSamples(pred.len()));
    }
    let c = count_pairs(pred, gt);
    let num = c.concordant as f64 - c.discordant as f64;
    let denom = match mode {
        TieMode::TauB => {
            let cd = (c.concordant + c.discordant) as f64;
            ((cd + c.tied_pred as f64) * (cd + c.tied_gt as f64)).sqrt()
        }
        TieMode::TauA => {
            let n = pred.len() as f64;
            n * (n - 1.0) / 2.0
        }
    };
    if c.concordant + c.discordant == 0 || denom == 0.0 {
        return Err(MetricError::AllTied);
    }
    Ok(num / denom)
}

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    check_positive(gt)?;
    if gt.is_empty() {
        return Err(MetricError::TooFewSamples(0));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| 100.0 * (p - g).abs() / g).sum();
    Ok(sum / gt.len() as f64)
}

/// Fraction of samples with `|pred - gt| / gt <= delta`.
pub fn acc_delta(pred: &[f64], gt: &[f64], delta: f64) -> Result<f64, MetricError> {
    check(pred, gt)?;
    check_positive(gt)?;
    if !(delta > 0.0) {
        return Err(MetricError::InvalidDelta(delta));
    }
    if gt.is_empty() {
        return Err(MetricError::TooFewSamples(0));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| (*p - *g).abs() / *g <= delta).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Key under which `acc_delta` at `delta` is reported, e.g. `acc@0.10`.
pub fn acc_key(delta: f64) -> String {
    format!("acc@{delta:.2}")
}

/// Metrics of one prediction set. Serializes as a flat JSON object:
/// `{"n": 200, "kendall_tau": 0.81, "mape": 7.5, "acc@0.10": 0.62}`.
/// Metrics that are undefined for the data (tau with all ties, MAPE with
/// non-positive targets) are omitted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub n: usize,
    pub kendall_tau: Option<f64>,
    pub mape: Option<f64>,
    /// Keyed by `delta`'s bit pattern so the map stays ordered and exact.
    pub acc_delta: BTreeMap<u64, f64>,
}

impl EvalReport {
    pub fn compute(pred: &[f64], gt: &[f64], deltas: &[f64]) -> Result<Self, MetricError> {
        check(pred, gt)?;
        let positive = check_positive(gt).is_ok() && !gt.is_empty();
        let mut acc = BTreeMap::new();
        if positive {
            for &d in deltas {
                acc.insert(d.to_bits(), acc_delta(pred, gt, d)?);
            }
        }
        Ok(Self {
            n: pred.len(),
            kendall_tau: kendall_tau(pred, gt).ok(),
            mape: if positive { Some(mape(pred, gt)?) } else { None },
            acc_delta: acc,
        })
    }

    pub fn acc(&self, delta: f64) -> Option<f64> {
        self.acc_delta.get(&delta.to_bits()).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(None)?;
        m.serialize_entry("n", &self.n)?;
        if let Some(t) = self.kendall_tau {
            m.serialize_entry("kendall_tau", &t)?;
        }
        if let Some(e) = self.mape {
            m.serialize_entry("mape", &e)?;
        }
        for (bits, v) in &self.acc_delta {
            m.serialize_entry(&acc_key(f64::from_bits(*bits)), v)?;
        }
        m.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(pred: &[f64], gt: &[f64]) -> PairCounts {
        let mut c = PairCounts { concordant: 0, discordant: 0, tied_pred: 0, tied_gt: 0 };
        for i in 0..pred.len() {
            for j in i + 1..pred.len() {
                let (dp, dg) = (pred[i] - pred[j], gt[i] - gt[j]);
                match (dp == 0.0, dg == 0.0) {
                    (true, true) => {}
                    (true, false) => c.tied_pred += 1,
                    (false, true) => c.tied_gt += 1,
                    _ if (dp > 0.0) == (dg > 0.0) => c.concordant += 1,
                    _ => c.discordant += 1,
                }
            }
        }
        c
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
        assert!((kendall_tau(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tau_errors() {
        assert_eq!(kendall_tau(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch { pred: 1, gt: 2 }));
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricError::AllTied));
        assert_eq!(kendall_tau(&[1.0], &[1.0]), Err(MetricError::TooFewSamples(1)));
        assert!(kendall_tau(&[f64::NAN, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pair_counts_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..300 {
            let n = rng.gen_range(2..40);
            let levels = if case % 2 == 0 { 5 } else { 1000 };
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
            assert_eq!(count_pairs(&p, &g), brute(&p, &g));
        }
    }

    #[test]
    fn tau_a_ignores_ties_in_denominator() {
        let p = [1.0, 1.0, 2.0];
        let g = [1.0, 2.0, 3.0];
        assert!((kendall_tau_with(&p, &g, TieMode::TauA).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((kendall_tau(&p, &g).unwrap() - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tau_is_symmetric_and_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p: Vec<f64> = (0..20).map(|_| rng.gen_range(0..8) as f64).collect();
            let g: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = kendall_tau(&p, &g).unwrap();
            assert_eq!(t, kendall_tau(&g, &p).unwrap());
            let warped: Vec<f64> = p.iter().map(|x| (x * 0.3).exp() + 5.0).collect();
            assert_eq!(t, kendall_tau(&warped, &g).unwrap());
        }
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[110.0], &[100.0]).unwrap(), 10.0);
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mape(&[90.0, 120.0], &[100.0, 100.0]).unwrap(), 15.0);
        assert_eq!(mape(&[1.0], &[0.0]), Err(MetricError::NonPositiveGroundTruth { index: 0, value: 0.0 }));
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc_delta(&[105.0], &[100.0], 0.10).unwrap(), 1.0);
        assert_eq!(acc_delta(&[111.0], &[100.0], 0.10).unwrap(), 0.0);
        assert_eq!(acc_delta(&[105.0, 95.0, 130.0], &[100.0; 3], 0.10).unwrap(), 2.0 / 3.0);
        // boundary counts as inside
        assert_eq!(acc_delta(&[1.5], &[1.0], 0.5).unwrap(), 1.0);
        assert_eq!(acc_delta(&[1.0, 9.0], &[1.0, 1.0], f64::INFINITY).unwrap(), 1.0);
        assert!(acc_delta(&[1.0], &[1.0], 0.0).is_err());
        assert!(acc_delta(&[1.0], &[-1.0], 0.1).is_err());
    }

    #[test]
    fn acc_is_monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..100).map(|_| rng.gen_range(0.5..2.0)).collect();
        let p: Vec<f64> = g.iter().map(|x| x * rng.gen_range(0.5..1.5)).collect();
        let mut last = 0.0;
        for k in 1..60 {
            let a = acc_delta(&p, &g, k as f64 * 0.01).unwrap();
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn report_is_flat_json() {
        let r = EvalReport::compute(&[1.0, 2.1, 2.9], &[1.0, 2.0, 3.0], &[0.1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["n"], 3);
        assert_eq!(v["kendall_tau"], 1.0);
        assert_eq!(v["acc@0.10"], 1.0);
        assert!(v["mape"].as_f64().unwrap() > 0.0);
        assert_eq!(r.acc(0.1), Some(1.0));

        let neg = EvalReport::compute(&[1.0, 2.0], &[-1.0, 2.0], &[0.1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&neg.to_json()).unwrap();
        assert!(v.get("mape").is_none() && v.get("acc@0.10").is_none());
    }
}
