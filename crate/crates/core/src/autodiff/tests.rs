use super::*;
use crate::dag::BoolMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3)).unwrap();
    let x = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let xv = tape.constant(x.clone()).unwrap();
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch(_))));
    let s = tape.constant(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(tape.add(a, s), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(m(&[&[3.0, 3.0, 3.0, 3.0]])).unwrap();
    let g = tape.leaf(Tensor::full(&[1, 4], 1.0)).unwrap();
    let b = tape.leaf(Tensor::zeros(&[1, 4])).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(m(&[&[-1.0, 0.0, 2.0]])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn nan_is_a_hard_error() {
    let mut tape = Tape::new();
    assert_eq!(tape.leaf(Tensor::scalar(f64::NAN)), Err(TensorError::NonFinite("leaf")));
    let x = tape.leaf(Tensor::scalar(1e300)).unwrap();
    assert_eq!(tape.scale(x, 1e300), Err(TensorError::NonFinite("scale")));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let l = tape.leaf(m(&[&[0.0, 0.0], &[5.0, -3.0]])).unwrap();
    let all = BoolMatrix::ones(2);
    let y = tape.softmax_rows_masked(l, &all, 1.0).unwrap();
    assert_eq!(tape.value(y).row(0), &[0.5, 0.5]);

    let first_only = BoolMatrix::from_rows(&[vec![true, false], vec![true, false]]).unwrap();
    let y = tape.softmax_rows_masked(l, &first_only, 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 1.0, 0.0]);

    let l = tape.leaf(m(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])).unwrap();
    let mask = BoolMatrix::from_rows(&[vec![true, false, true], vec![false, true, false], vec![false, false, true]]).unwrap();
    let y = tape.softmax_rows_masked(l, &mask, 1.0).unwrap();
    let e1 = 1f64.exp();
    let e3 = 3f64.exp();
    let want = [e1 / (e1 + e3), 0.0, e3 / (e1 + e3)];
    for (a, b) in tape.value(y).row(0).iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_empty_row_is_an_error() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
    let mask = BoolMatrix::from_rows(&[vec![true, false], vec![false, false]]).unwrap();
    assert_eq!(tape.softmax_rows_masked(l, &mask, 1.0), Err(TensorError::EmptyRowMask(1)));
}

#[test]
fn mse_examples() {
    let cases: [(&[f64], &[f64], f64); 3] =
        [(&[1.0, 2.0], &[1.0, 2.0], 0.0), (&[2.0], &[0.0], 4.0), (&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 14.0 / 3.0)];
    for (p, t, want) in cases {
        let mut tape = Tape::new();
        let p = tape.leaf(m(&[p])).unwrap();
        let t = tape.constant(m(&[t])).unwrap();
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), want);
    }
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::zeros(&[1, 2])).unwrap();
    let t = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(matches!(tape.mse_loss(p, t), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::full(&[2, 2], 1.5)).unwrap();
    let loss = tape.mean(w).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[0.25; 4]);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[0.5; 4], "second call accumulates");
    tape.zero_grads();
    assert!(tape.grad(w).is_none());

    // loss = mse(x*w, y) at x=1, w=2, y=0 -> dL/dw = 2*(2-0)*1 = 4
    let mut tape = Tape::new();
    let x = tape.constant(m(&[&[1.0]])).unwrap();
    let w = tape.leaf(m(&[&[2.0]])).unwrap();
    let y = tape.constant(m(&[&[0.0]])).unwrap();
    let p = tape.matmul(x, w).unwrap();
    let l = tape.mse_loss(p, y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[4.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
    assert_eq!(tape.backward(w), Err(TensorError::NotScalar(vec![2, 2])));
    let c = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let l = tape.mean(c).unwrap();
    assert_eq!(tape.backward(l), Err(TensorError::DetachedGraph));
}

#[test]
fn dropout_semantics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 100_000], 1.0)).unwrap();
    let eval = tape.dropout(x, 0.5, false, 1).unwrap();
    assert_eq!(eval, x);
    let y = tape.dropout(x, 0.5, true, 7).unwrap();
    let vals = tape.value(y).data();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let again = tape.dropout(x, 0.5, true, 7).unwrap();
    assert_eq!(tape.value(again), tape.value(y));
    assert!(tape.dropout(x, 1.0, true, 7).is_err());
}

#[test]
fn quadratic_grad_check() {
    let mut obj = (
        |t: &[f64]| Ok(t[0] * t[0]),
        |t: &[f64]| Ok((t[0] * t[0], vec![2.0 * t[0]])),
    );
    let r = finite_diff_check(&mut obj, &[3.0], 1e-5, 1e-8).unwrap();
    assert!(r.passed);
    assert!((r.numeric - 6.0).abs() < 1e-8);
}

#[test]
fn grad_check_flags_non_determinism() {
    let mut calls = 0.0;
    let mut obj = (
        move |t: &[f64]| {
            calls += 1.0;
            Ok(t[0] + calls)
        },
        |t: &[f64]| Ok((t[0], vec![1.0])),
    );
    assert!(matches!(
        finite_diff_check(&mut obj, &[0.0], 1e-5, 1e-4),
        Err(TensorError::NonDeterministicFunction { .. })
    ));
    let mut ok = (|t: &[f64]| Ok(t[0]), |t: &[f64]| Ok((t[0], vec![1.0])));
    assert!(finite_diff_check(&mut ok, &[0.0], 1.0, 1e-4).is_err(), "step outside range");
}

/// Builds a scalar from every primitive in a single expression, driven by a
/// flat parameter vector split into the named pieces below.
fn composite(theta: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>), TensorError> {
    let (a, rest) = theta.split_at(12); // 3x4
    let (b, rest) = rest.split_at(8); // 4x2
    let (g, rest) = rest.split_at(2);
    let (bt, rest) = rest.split_at(2);
    let (c, _) = rest.split_at(6); // 3x2

    let mut tape = Tape::new();
    let leaves = [
        tape.leaf(Tensor::matrix(3, 4, a.to_vec())?)?,
        tape.leaf(Tensor::matrix(4, 2, b.to_vec())?)?,
        tape.leaf(Tensor::matrix(1, 2, g.to_vec())?)?,
        tape.leaf(Tensor::matrix(1, 2, bt.to_vec())?)?,
        tape.leaf(Tensor::matrix(3, 2, c.to_vec())?)?,
    ];
    let [a, b, g, bt, c] = leaves;
    let ab = tape.matmul(a, b)?;
    let ln = tape.layer_norm(ab, g, bt, 1e-5)?;
    let h = tape.hadamard(ln, c)?;
    let s = tape.add(h, c)?;
    let s = tape.add_row(s, g)?;
    let r = tape.relu(s)?;
    let rt = tape.transpose(r)?;
    let logits = tape.matmul(r, rt)?;
    let mask = BoolMatrix::from_rows(&[vec![true, true, false], vec![false, true, true], vec![true, false, true]]).unwrap();
    let att = tape.softmax_rows_masked(logits, &mask, 1.7)?;
    let mixed = tape.matmul(att, c)?;
    let cat = tape.concat_cols(mixed, r)?;
    let row = tape.select_row(cat, 1)?;
    let stacked = tape.concat_rows(&[cat, row])?;
    let summed = tape.sum_rows(stacked)?;
    let sc = tape.scale(summed, 0.3)?;
    let target = tape.constant(Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.0])?)?;
    let mse = tape.mse_loss(sc, target)?;
    let m = tape.mean(cat)?;
    let loss = tape.add(mse, m)?;
    let value = tape.value(loss).item()?;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let mut grad = Vec::new();
    for l in leaves {
        grad.extend_from_slice(tape.grad(l).map(|t| t.data()).unwrap_or(&[]));
    }
    Ok((value, grad))
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let theta: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut obj = (|t: &[f64]| composite(t, false).map(|r| r.0), |t: &[f64]| composite(t, true));
        let r = finite_diff_check(&mut obj, &theta, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 30);
    }
}

#[test]
fn relu_away_from_kink_is_exact() {
    let f = |t: &[f64], grad: bool| -> Result<(f64, Vec<f64>), TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, t.to_vec())?)?;
        let y = tape.relu(x)?;
        let l = tape.mean(y)?;
        let v = tape.value(l).item()?;
        if grad {
            tape.backward(l)?;
            return Ok((v, tape.grad(x).unwrap().data().to_vec()));
        }
        Ok((v, vec![]))
    };
    let mut obj = (|t: &[f64]| f(t, false).map(|r| r.0), |t: &[f64]| f(t, true));
    let r = finite_diff_check(&mut obj, &[0.7, -0.4], 1e-5, 1e-6).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn masked_softmax_rows_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..9);
        let mut mask = BoolMatrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.4) {
                    mask.set(i, j, true);
                }
            }
        }
        let mut tape = Tape::new();
        let l = tape.leaf(random(&mut rng, n, n)).unwrap();
        let y = tape.softmax_rows_masked(l, &mask, rng.gen_range(0.5..4.0)).unwrap();
        let w = tape.constant(random(&mut rng, n, n)).unwrap();
        let p = tape.hadamard(y, w).unwrap();
        let loss = tape.mean(p).unwrap();
        tape.backward(loss).unwrap();
        let yv = tape.value(y);
        let gv = tape.grad(l).unwrap();
        for i in 0..n {
            let s: f64 = yv.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..n {
                if !mask.get(i, j) {
                    assert_eq!(yv.get2(i, j), 0.0);
                    assert_eq!(gv.get2(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn borrowed_leaves_share_storage() {
    let w = Tensor::full(&[1, 3], 2.0);
    let mut tape = Tape::new();
    let v = tape.leaf_ref(&w).unwrap();
    let l = tape.mean(v).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(v).unwrap().shape(), &[1, 3]);
    assert!(std::ptr::eq(tape.value(v), &w));
}

fn segments(lens: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> BoolMatrix {
    let mut m = BoolMatrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if rng.gen_bool(0.4) {
                m.set(i, j, true);
            }
        }
    }
    m
}

// Plain-loop attention for one head of one segment.
fn reference_head(x: &Tensor, seg: Segment, head: usize, hd: usize, mask: &BoolMatrix, scale: f64) -> Vec<f64> {
    let d = x.cols() / 3;
    let n = seg.len;
    let at = |r: usize, c: usize| x.get2(seg.start + r, c);
    let mut out = vec![0.0; n * hd];
    for r in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..hd).map(|k| at(r, head * hd + k) * at(j, d + head * hd + k)).sum::<f64>() / scale)
            .collect();
        let max = (0..n).filter(|&j| mask.get(r, j)).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = (0..n).map(|j| if mask.get(r, j) { (logits[j] - max).exp() } else { 0.0 }).collect();
        let z: f64 = w.iter().sum();
        for k in 0..hd {
            out[r * hd + k] = (0..n).map(|j| w[j] / z * at(j, 2 * d + head * hd + k)).sum();
        }
    }
    out
}

#[test]
fn segment_attention_matches_plain_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (heads, hd) = (4, 3);
    let segs = segments(&[3, 1, 5]);
    let x = random(&mut rng, 9, 3 * heads * hd);
    let masks: Vec<Vec<BoolMatrix>> =
        segs.iter().map(|s| (0..heads).map(|_| random_mask(&mut rng, s.len)).collect()).collect();
    let refs: Vec<&[BoolMatrix]> = masks.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let v = tape.leaf_ref(&x).unwrap();
    let out = tape.segment_attention(v, heads, segs.clone(), &refs, 1.3, 0.0, false, 0).unwrap();
    let out = tape.value(out);
    assert_eq!(out.shape(), [9, heads * hd]);
    for (s, seg) in segs.iter().enumerate() {
        for h in 0..heads {
            let want = reference_head(&x, *seg, h, hd, &masks[s][h], 1.3);
            for r in 0..seg.len {
                for k in 0..hd {
                    let got = out.get2(seg.start + r, h * hd + k);
                    assert!((got - want[r * hd + k]).abs() < 1e-13);
                }
            }
        }
    }
}

#[test]
fn segment_attention_rejects_bad_input() {
    let x = Tensor::zeros(&[4, 12]);
    let masks = vec![BoolMatrix::identity(4); 4];
    let mut tape = Tape::new();
    let v = tape.leaf(x).unwrap();
    let segs = segments(&[4]);
    let short = &masks[..3];
    assert!(tape.segment_attention(v, 4, segs.clone(), &[short], 1.0, 0.0, false, 0).is_err());
    assert!(tape.segment_attention(v, 4, segments(&[5]), &[&masks], 1.0, 0.0, false, 0).is_err());
    let mut empty = masks.clone();
    empty[2] = BoolMatrix::zeros(4);
    assert_eq!(
        tape.segment_attention(v, 4, segs, &[&empty], 1.0, 0.0, false, 0),
        Err(TensorError::EmptyRowMask(0))
    );
}

fn batched(theta: &[f64], want_grad: bool, dropout: f64) -> Result<(f64, Vec<f64>), TensorError> {
    let (x, rest) = theta.split_at(7 * 24);
    let (w, _) = rest.split_at(8 * 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let segs = segments(&[4, 3]);
    let masks: Vec<Vec<BoolMatrix>> = segs.iter().map(|s| (0..4).map(|_| random_mask(&mut rng, s.len)).collect()).collect();
    let refs: Vec<&[BoolMatrix]> = masks.iter().map(Vec::as_slice).collect();
    let ops = [random(&mut rng, 4, 4), random(&mut rng, 3, 3)];

    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(7, 24, x.to_vec())?)?;
    let wv = tape.leaf(Tensor::matrix(8, 3, w.to_vec())?)?;
    let att = tape.segment_attention(xv, 4, segs.clone(), &refs, 1.5, dropout, dropout > 0.0, 17)?;
    let agg = tape.block_diag_matmul(vec![(0, &ops[0]), (4, &ops[1])], att)?;
    let proj = tape.matmul(agg, wv)?;
    let pooled = tape.segment_sum(proj, segs)?;
    let picked = tape.gather_rows(proj, vec![6, 0, 0])?;
    let t1 = tape.constant(Tensor::matrix(2, 3, vec![0.5, -0.1, 0.2, 0.0, 1.0, -0.4])?)?;
    let t2 = tape.constant(Tensor::matrix(3, 3, vec![0.3; 9])?)?;
    let l1 = tape.mse_loss(pooled, t1)?;
    let l2 = tape.mse_loss(picked, t2)?;
    let loss = tape.add(l1, l2)?;
    let value = tape.value(loss).item()?;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let mut grad = tape.grad(xv).unwrap().data().to_vec();
    grad.extend_from_slice(tape.grad(wv).unwrap().data());
    Ok((value, grad))
}

#[test]
fn batched_primitives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for dropout in [0.0, 0.3] {
        let theta: Vec<f64> = (0..7 * 24 + 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut obj = (|t: &[f64]| batched(t, false, dropout).map(|r| r.0), |t: &[f64]| batched(t, true, dropout));
        let r = finite_diff_check(&mut obj, &theta, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "dropout {dropout}: {r:?}");
    }
}

#[test]
fn attention_dropout_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta: Vec<f64> = (0..7 * 24 + 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = batched(&theta, false, 0.3).unwrap().0;
    let b = batched(&theta, false, 0.3).unwrap().0;
    let c = batched(&theta, false, 0.0).unwrap().0;
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(a, c);
}
