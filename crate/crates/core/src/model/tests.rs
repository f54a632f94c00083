use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Tape, Tensor, TensorError};
use crate::dag::{build_mask_set, Dag, MaskVariant, NodeDescriptor};

fn small(mask: MaskVariant, ffn: FfnVariant, readout: Readout) -> ModelConfig {
    ModelConfig {
        channels: 16,
        blocks: 2,
        dropout: 0.0,
        mask_variant: mask,
        ffn_variant: ffn,
        readout,
        ..ModelConfig::accuracy()
    }
}

/// Parameters drawn uniformly from [-0.5, 0.5] so that every path through
/// the block carries signal, unlike the 0.02 initializer.
fn loud_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let flat: Vec<f64> = (0..p.num_scalars()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    p.set_flat(&flat).unwrap();
    p
}

fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> Dag {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.35) {
                edges.push((i, j));
            }
        }
    }
    let nodes = (0..n).map(|_| NodeDescriptor::op(rng.gen_range(0..6))).collect();
    Dag::new(nodes, &edges).unwrap()
}

fn random_h(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

enum Stage {
    Attention,
    FeedForward,
    Block,
}

fn run_stage(params: &Params, dag: &Dag, h: &Tensor, stage: Stage) -> Tensor {
    let graph = GraphInput::new(dag, params.config()).unwrap();
    let batch = Batch::single(&graph).unwrap();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::EVAL).unwrap();
    let x = fwd.tape.constant_ref(h).unwrap();
    let y = match stage {
        Stage::Attention => fwd.attention(x, &batch, 0),
        Stage::FeedForward => fwd.feed_forward(x, &batch, 0),
        Stage::Block => fwd.block(x, &batch, 0),
    }
    .unwrap();
    tape.value(y).clone()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

#[test]
fn presets() {
    let acc = ModelConfig::accuracy();
    assert_eq!((acc.channels, acc.blocks, acc.heads, acc.ffn_expansion), (160, 12, 4, 4));
    assert_eq!(acc.dropout, 0.1);
    assert_eq!(acc.readout, Readout::ClassToken);
    let lat = ModelConfig::latency();
    assert_eq!((lat.channels, lat.blocks, lat.input_dim()), (512, 2, 192));
    assert_eq!(lat.dropout, 0.05);
    assert_eq!(lat.readout, Readout::SumNodes);
    assert!(acc.validate().is_ok() && lat.validate().is_ok());
}

#[test]
fn config_errors() {
    let mut cfg = ModelConfig::accuracy();
    cfg.heads = 3;
    assert!(matches!(init_params(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    cfg = ModelConfig::accuracy();
    cfg.channels = 162;
    assert!(cfg.validate().is_err());
    cfg = ModelConfig::accuracy();
    cfg.dropout = 1.0;
    assert!(cfg.validate().is_err());
    assert!("nonsense".parse::<FfnVariant>().is_err());
    assert_eq!("bgidefault".parse::<FfnVariant>().unwrap(), FfnVariant::BgiDefault);
    assert_eq!("sum".parse::<Readout>().unwrap(), Readout::SumNodes);
}

#[test]
fn init_statistics() {
    let cfg = ModelConfig::accuracy();
    let p = init_params(&cfg, 7).unwrap();
    let weights: Vec<f64> = p
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Weight)
        .flat_map(|e| e.value.data().iter().copied())
        .collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    assert!(mean.abs() < 0.002, "mean {mean}");
    assert!(weights.iter().all(|w| w.abs() <= 0.04));
    let var = weights.iter().map(|w| w * w).sum::<f64>() / weights.len() as f64;
    // Variance of N(0, 0.02²) truncated at ±2σ is about 0.774 σ².
    assert!((var.sqrt() / INIT_STD - 0.88).abs() < 0.02, "std {}", var.sqrt());
    for e in p.entries() {
        match e.kind {
            ParamKind::NormGain => assert!(e.value.data().iter().all(|&v| v == 1.0)),
            ParamKind::Bias | ParamKind::NormShift => assert!(e.value.data().iter().all(|&v| v == 0.0)),
            ParamKind::Weight => {}
        }
    }
    assert_eq!(p, init_params(&cfg, 7).unwrap());
    assert_ne!(p, init_params(&cfg, 8).unwrap());
}

#[test]
fn layout_names_and_decay_set() {
    let p = init_params(&small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::ClassToken), 0).unwrap();
    assert_eq!(p.get("blocks.1.ffn.graph.0").unwrap().shape(), [16, 32]);
    assert_eq!(p.get("blocks.0.attn.query.3").unwrap().shape(), [16, 4]);
    assert_eq!(p.get("head.weight").unwrap().shape(), [16, 1]);
    assert!(p.get("class_token").is_some());
    for e in p.entries() {
        let exempt = e.name.ends_with(".gain") || e.name.ends_with(".shift") || e.name.contains("bias")
            || e.name.ends_with(".b1") || e.name.ends_with(".b2");
        assert_eq!(e.kind.decays(), !exempt, "{}", e.name);
    }
    let four = init_params(&small(MaskVariant::AsmaDefault, FfnVariant::FourSplit, Readout::SumNodes), 0).unwrap();
    assert_eq!(four.get("blocks.0.ffn.graph.3").unwrap().shape(), [16, 16]);
    let fwd = init_params(&small(MaskVariant::AsmaDefault, FfnVariant::FwdOnlySplit, Readout::SumNodes), 0).unwrap();
    assert_eq!(fwd.get("blocks.0.ffn.graph.0").unwrap().shape(), [16, 64]);
    assert!(fwd.get("blocks.0.ffn.graph.1").is_none());
}

#[test]
fn accuracy_shape_walk() {
    let cfg = ModelConfig::accuracy();
    let params = init_params(&cfg, 1).unwrap();
    let edges = [(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 5), (5, 6)];
    let dag = Dag::new((0..7).map(|i| NodeDescriptor::op(i % 5)).collect(), &edges).unwrap();
    let graph = GraphInput::new(&dag, &cfg).unwrap();
    assert_eq!(graph.features.shape(), [7, 32]);
    let batch = Batch::single(&graph).unwrap();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &params, Mode::EVAL).unwrap();
    let h0 = fwd.embed(&batch).unwrap();
    assert_eq!(fwd.tape.value(h0).shape(), [8, 160]);
    let y = fwd.predict(&batch).unwrap();
    assert_eq!(tape.value(y).shape(), [1, 1]);
}

#[test]
fn single_node_attention_is_its_own_value() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let params = loud_params(&cfg, 3);
    let dag = Dag::unlabeled(1, &[]).unwrap();
    let h = random_h(&mut ChaCha8Rng::seed_from_u64(1), 1, 16);
    let got = run_stage(&params, &dag, &h, Stage::Attention);
    let mut v = Vec::new();
    for i in 0..4 {
        v.extend_from_slice(matmul(&h, params.get(&format!("blocks.0.attn.value.{i}")).unwrap()).data());
    }
    let want = matmul(&Tensor::matrix(1, 16, v).unwrap(), params.get("blocks.0.attn.out").unwrap());
    assert!(got.max_abs_diff(&want) < 1e-14);
}

#[test]
fn isolated_nodes_do_not_attend_to_each_other() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let params = loud_params(&cfg, 4);
    let dag = Dag::unlabeled(2, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random_h(&mut rng, 2, 16);
    let mut h2 = h.clone();
    h2.data_mut()[16..].iter_mut().for_each(|v| *v += 0.7);
    let a = run_stage(&params, &dag, &h, Stage::Attention);
    let b = run_stage(&params, &dag, &h2, Stage::Attention);
    assert_eq!(a.row(0), b.row(0));
    assert_ne!(a.row(1), b.row(1));
}

fn plain_params_from(bgi: &Params) -> Params {
    let mut cfg = *bgi.config();
    cfg.ffn_variant = FfnVariant::PlainFfn;
    let named = bgi
        .entries()
        .iter()
        .filter(|e| !e.name.contains(".ffn.graph."))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    Params::from_named(&cfg, named).unwrap()
}

#[test]
fn edgeless_graph_ffn_is_plain() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let params = loud_params(&cfg, 5);
    let plain = plain_params_from(&params);
    let dag = Dag::unlabeled(3, &[]).unwrap();
    let h = random_h(&mut ChaCha8Rng::seed_from_u64(3), 3, 16);
    let a = run_stage(&params, &dag, &h, Stage::FeedForward);
    let b = run_stage(&plain, &dag, &h, Stage::FeedForward);
    assert_eq!(a, b);
    // ReLU(H·W1 + b1)·W2 + b2 written out.
    let get = |n: &str| params.get(&format!("blocks.0.ffn.{n}")).unwrap();
    let mut hid = matmul(&h, get("w1"));
    for r in 0..3 {
        for j in 0..64 {
            hid.data_mut()[r * 64 + j] = (hid.get2(r, j) + get("b1").data()[j]).max(0.0);
        }
    }
    let mut out = matmul(&hid, get("w2"));
    for r in 0..3 {
        for j in 0..16 {
            out.data_mut()[r * 16 + j] += get("b2").data()[j];
        }
    }
    assert!(a.max_abs_diff(&out) < 1e-12);
}

#[test]
fn diamond_sink_has_no_forward_aggregate() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let mut params = loud_params(&cfg, 6);
    // Leave only the forward graph half alive.
    for e in params.entries_mut() {
        let n = e.name.as_str();
        if n.starts_with("blocks.0.ffn.") && !(n.ends_with("graph.0") || n.ends_with("w2")) {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let dag = Dag::unlabeled(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
    let h = random_h(&mut ChaCha8Rng::seed_from_u64(4), 4, 16);
    let out = run_stage(&params, &dag, &h, Stage::FeedForward);
    assert!(out.row(3).iter().all(|&v| v == 0.0));
    assert!(out.row(0).iter().any(|&v| v != 0.0));
    let op = graph_operator(&dag, GraphOp::Fwd);
    assert!(op.row(3).iter().all(|&v| v == 0.0));
}

#[test]
fn sibling_operators_drop_the_diagonal() {
    let dag = Dag::unlabeled(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
    let cp = graph_operator(&dag, GraphOp::CommonParent);
    assert_eq!(cp.data().iter().filter(|&&v| v != 0.0).count(), 2);
    assert_eq!((cp.get2(1, 2), cp.get2(2, 1), cp.get2(1, 1)), (1.0, 1.0, 0.0));
    let cc = graph_operator(&dag, GraphOp::CommonChild);
    assert_eq!((cc.get2(1, 2), cc.get2(0, 0)), (1.0, 0.0));
    let sym = graph_operator(&dag, GraphOp::SymNorm);
    assert!((sym.get2(0, 1) - 0.5).abs() < 1e-15);
    assert_eq!(sym, sym_transpose(&sym));
}

fn sym_transpose(t: &Tensor) -> Tensor {
    let n = t.rows();
    Tensor::matrix(n, n, (0..n * n).map(|k| t.get2(k % n, k / n)).collect()).unwrap()
}

/// Nodes within one hop of `v` through the union of the attention masks.
fn mask_reach(dag: &Dag, variant: MaskVariant, v: usize) -> Vec<bool> {
    let set = build_mask_set(dag, variant);
    (0..dag.len()).map(|u| set.masks().iter().any(|m| m.get(v, u))).collect()
}

#[test]
fn perturbations_stay_within_mask_reach() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..30 {
        let dag = random_dag(&mut rng, 7);
        let n = dag.len();
        for ffn in [FfnVariant::PlainFfn, FfnVariant::BgiDefault] {
            let cfg = small(MaskVariant::AsmaDefault, ffn, Readout::SumNodes);
            let params = loud_params(&cfg, case);
            let h = random_h(&mut rng, n, 16);
            let base = run_stage(&params, &dag, &h, Stage::Block);
            let u = rng.gen_range(0..n);
            let mut h2 = h.clone();
            h2.data_mut()[u * 16..(u + 1) * 16].iter_mut().for_each(|x| *x += rng.gen_range(0.5..1.0));
            let moved = run_stage(&params, &dag, &h2, Stage::Block);
            for v in 0..n {
                // With graph aggregation in the FFN, v also sees what its
                // parents and children saw during attention.
                let mut hood = vec![v];
                if ffn == FfnVariant::BgiDefault {
                    hood.extend(dag.children(v).chain(dag.parents(v)));
                }
                let reachable = hood.iter().any(|&w| mask_reach(&dag, MaskVariant::AsmaDefault, w)[u]);
                if !reachable {
                    assert_eq!(base.row(v), moved.row(v), "case {case} {ffn:?}: node {v} moved by {u}");
                }
            }
            assert_ne!(base.row(u), moved.row(u));
        }
    }
}

#[test]
fn predictions_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for readout in [Readout::ClassToken, Readout::SumNodes] {
        let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, readout);
        let params = loud_params(&cfg, 11);
        for _ in 0..10 {
            let dag = random_dag(&mut rng, 8);
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let a = model_forward(&dag, &params, false).unwrap();
            let b = model_forward(&dag.permuted(&perm).unwrap(), &params, false).unwrap();
            assert!((a - b).abs() <= 1e-9, "{readout:?}: {a} vs {b}");
        }
    }
}

#[test]
fn eval_is_deterministic_and_train_uses_dropout() {
    let mut cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::ClassToken);
    cfg.dropout = 0.3;
    let params = loud_params(&cfg, 12);
    let dag = random_dag(&mut ChaCha8Rng::seed_from_u64(5), 6);
    let a = model_forward(&dag, &params, false).unwrap();
    let b = model_forward(&dag, &params, false).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let graph = GraphInput::new(&dag, &cfg).unwrap();
    let t1 = predict_prepared(&graph, &params, Mode::train(1)).unwrap();
    let t1b = predict_prepared(&graph, &params, Mode::train(1)).unwrap();
    let t2 = predict_prepared(&graph, &params, Mode::train(2)).unwrap();
    assert_eq!(t1.to_bits(), t1b.to_bits());
    assert_ne!(t1, t2);
    assert_ne!(t1, a);
}

#[test]
fn batches_match_single_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for readout in [Readout::ClassToken, Readout::SumNodes] {
        let cfg = small(MaskVariant::AsmaDefault, FfnVariant::FourSplit, readout);
        let params = loud_params(&cfg, 14);
        let graphs: Vec<GraphInput> = (0..5)
            .map(|i| GraphInput::new(&random_dag(&mut rng, 2 + 2 * i), &cfg).unwrap())
            .collect();
        let batched = predict_many(&graphs, &params, 3).unwrap();
        let targets: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
        let zeros = || params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let mut together = zeros();
        let batch = Batch::new(graphs.iter().collect()).unwrap();
        let loss = loss_and_grad(&batch, &targets, &params, Mode::EVAL, &mut together).unwrap();
        let mut separate = zeros();
        let mut loss_sum = 0.0;
        for (i, g) in graphs.iter().enumerate() {
            let single = predict_prepared(g, &params, Mode::EVAL).unwrap();
            assert!((single - batched[i]).abs() < 1e-12);
            loss_sum += loss_and_grad(&Batch::single(g).unwrap(), &targets[i..=i], &params, Mode::EVAL, &mut separate)
                .unwrap();
        }
        assert!((loss - loss_sum / 5.0).abs() < 1e-12);
        for (a, b) in together.iter().zip(&separate) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y / 5.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loss_and_grad_checks_target_count() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let params = init_params(&cfg, 0).unwrap();
    let graph = GraphInput::new(&Dag::unlabeled(2, &[(0, 1)]).unwrap(), &cfg).unwrap();
    let mut grads: Vec<Tensor> = params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let batch = Batch::single(&graph).unwrap();
    assert!(loss_and_grad(&batch, &[1.0, 2.0], &params, Mode::EVAL, &mut grads).is_err());
    assert!(Batch::new(Vec::new()).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small(MaskVariant::TwoHop, FfnVariant::MultiplyCombine, Readout::ClassToken);
    let params = loud_params(&cfg, 15);
    let ck = Checkpoint::new(params.clone(), TargetNorm::fit(&[0.3, 1.0 / 3.0, 7.25]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.target_norm, ck.target_norm);
    assert_eq!(back.params.config(), params.config());
    let bits = |p: &Params| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.params), bits(&params));
}

#[test]
fn checkpoint_mismatches_are_rejected() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes);
    let json = Checkpoint::new(init_params(&cfg, 0).unwrap(), None).to_json().unwrap();
    let renamed = json.replacen("head.w1", "head.wx", 1);
    assert!(matches!(Checkpoint::from_json(&renamed), Err(ModelError::CheckpointMismatch(_))));
    let wrong_format = json.replacen("dagpredict-checkpoint", "other", 1);
    assert!(Checkpoint::from_json(&wrong_format).is_err());
    assert!(Checkpoint::from_json("{").is_err());
    assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/ck.json")), Err(ModelError::Io(_))));
}

#[test]
fn target_norm_maps_train_range_to_unit_interval() {
    let n = TargetNorm::fit(&[2.0, 4.0, 3.0]).unwrap();
    assert_eq!(n.normalize(2.0), 0.0);
    assert_eq!(n.normalize(4.0), 1.0);
    assert_eq!(n.denormalize(n.normalize(3.3)), 3.3);
    let flat = TargetNorm::fit(&[5.0, 5.0]).unwrap();
    assert_eq!(flat.normalize(6.0), 1.0);
    assert!(TargetNorm::fit(&[]).is_none());
}

#[test]
fn full_model_gradients_check_out() {
    let cfg = small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::ClassToken);
    let a = check_gradients(&cfg, 5, 3, 1e-5, 1e-4).unwrap();
    assert!(a.report.passed, "{a:?}");
    assert_eq!(a.report.checked, init_params(&cfg, 0).unwrap().num_scalars());
    let b = check_gradients(&cfg, 5, 3, 1e-5, 1e-4).unwrap();
    assert_eq!(a.report.max_rel_err.to_bits(), b.report.max_rel_err.to_bits());
    assert!(!a.param.is_empty());
}

#[test]
fn gradient_check_rejects_dropout() {
    let cfg = ModelConfig { dropout: 0.1, ..small(MaskVariant::AsmaDefault, FfnVariant::BgiDefault, Readout::SumNodes) };
    let err = check_gradients(&cfg, 5, 3, 1e-5, 1e-4).unwrap_err();
    assert!(matches!(err, ModelError::Tensor(TensorError::NonDeterministicFunction { .. })), "{err:?}");
}
