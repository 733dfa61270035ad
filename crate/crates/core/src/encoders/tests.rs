use super::*;
use crate::autodiff::{backward, evaluate, grad_check, Mode};

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        attention_dim: 3,
        spatial_channels: vec![2, 3, 2, 2, 2, 2],
        frame_dim: 5,
        temporal_channels: vec![4, 3, 4, 3, 5],
        hidden_dim: 5,
        ..ModelConfig::default()
    }
}

fn small_shape() -> InputShape {
    InputShape {
        pose_dim: 12,
        image_extent: 16,
        neural_len: 4,
        behavior_len: 4,
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test-input", 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn feeds(pairs: &[(&str, Tensor)]) -> TensorMap {
    pairs
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[test]
fn extents_outside_the_scaling_rule_are_rejected() {
    let err = spatial_depth(24).unwrap_err().to_string();
    assert!(err.contains("[8, 16, 32, 64, 128]"), "{err}");
    assert_eq!(spatial_depth(128).unwrap(), 6);
    assert_eq!(spatial_depth(32).unwrap(), 4);
    assert_eq!(spatial_depth(16).unwrap(), 3);
}

#[test]
fn full_size_neural_encoder_shapes() {
    let shape = InputShape {
        pose_dim: 60,
        image_extent: 128,
        neural_len: 32,
        behavior_len: 8,
    };
    let cfg = ModelConfig::default();
    let mut mb = ModelBuilder::<f64>::new(&cfg, shape).unwrap();
    let x = mb.graph.input("neural", &[1, 32, 128, 128]).unwrap();
    let h = mb.neural_encoder(x).unwrap();
    assert_eq!(mb.graph.shape(h), &[1, 128]);
    let frames = mb
        .graph
        .nodes()
        .iter()
        .find(|n| n.label == "fn.fc14.relu")
        .unwrap();
    // one 128-d feature per frame
    assert_eq!(frames.shape, vec![32, 128]);
    let p = init_params::<f64>(&cfg, shape, &[], 0).unwrap();
    let input = feeds(&[("neural", random(&[1, 32, 128, 128], 1))]);
    let e = evaluate(&mb.graph, &[&p.params, &p.running, &input], Mode::Eval).unwrap();
    assert_eq!(e.value(h).shape(), &[1, 128]);
    assert!(e.value(h).all_finite());
}

#[test]
fn behavior_encoder_pools_time_by_two() {
    let shape = InputShape {
        pose_dim: 60,
        image_extent: 32,
        neural_len: 32,
        behavior_len: 8,
    };
    let mut mb = ModelBuilder::<f64>::new(&ModelConfig::default(), shape).unwrap();
    let x = mb.graph.input("behavior", &[2, 8, 60]).unwrap();
    let h = mb.behavior_encoder(x).unwrap();
    let s = mb
        .graph
        .nodes()
        .iter()
        .find(|n| n.label == "fb.conv5.relu")
        .unwrap();
    assert_eq!(s.shape, vec![2, 128, 4]);
    assert_eq!(mb.graph.shape(h), &[2, 128]);
    let bad = mb.graph.input("wrong", &[2, 8, 59]).unwrap();
    assert!(mb.behavior_encoder(bad).is_err());
}

#[test]
fn init_is_seeded() {
    let a = init_params::<f64>(&small_config(), small_shape(), &[], 4).unwrap();
    let b = init_params::<f64>(&small_config(), small_shape(), &[], 4).unwrap();
    let c = init_params::<f64>(&small_config(), small_shape(), &[], 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
    assert!(a.params.keys().any(|k| k == "fn.spatial3.weight"));
    assert!(!a.params.keys().any(|k| k == "fn.spatial4.weight"));
}

#[test]
fn kaiming_std_matches_fan_in() {
    let shape = InputShape {
        pose_dim: 60,
        image_extent: 32,
        neural_len: 32,
        behavior_len: 8,
    };
    let p = init_params::<f64>(&ModelConfig::default(), shape, &[], 0).unwrap();
    for name in [
        "fn.temporal.conv5.weight",
        "fb.conv4.weight",
        "fn.fc14.weight",
    ] {
        let t = &p.params[name];
        let fan_in = match p.specs[name].init {
            Init::Kaiming { fan_in } => fan_in,
            _ => unreachable!(),
        };
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0 / fan_in as f64).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "{name}: {std} vs {want}");
    }
    assert!(p.params["fb.conv1.bn.beta"]
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(p.params["fb.conv1.bn.gamma"]
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert!(p.params["fn.fc.bias"].data().iter().all(|&v| v == 0.0));
}

fn encoder_graph(batch: usize) -> (Graph, NodeId, NodeId) {
    let s = small_shape();
    let mut mb = ModelBuilder::<f64>::new(&small_config(), s).unwrap();
    let xn = mb
        .graph
        .input("neural", &[batch, s.neural_len, 16, 16])
        .unwrap();
    let xb = mb
        .graph
        .input("behavior", &[batch, s.behavior_len, s.pose_dim])
        .unwrap();
    let hn = mb.neural_encoder(xn).unwrap();
    let hb = mb.behavior_encoder(xb).unwrap();
    (mb.graph, hn, hb)
}

#[test]
fn eval_mode_has_no_cross_sample_mixing() {
    let p = init_params::<f64>(&small_config(), small_shape(), &[], 2).unwrap();
    let (g3, hn3, hb3) = encoder_graph(3);
    let (g1, hn1, hb1) = encoder_graph(1);
    let xn = random(&[3, 4, 16, 16], 7);
    let xb = random(&[3, 4, 12], 8);
    let batch = evaluate(
        &g3,
        &[
            &p.params,
            &p.running,
            &feeds(&[("neural", xn.clone()), ("behavior", xb.clone())]),
        ],
        Mode::Eval,
    )
    .unwrap();
    // reverse the batch order
    let rev = |t: &Tensor| {
        Tensor::stack(&[t.index_axis0(2), t.index_axis0(1), t.index_axis0(0)]).unwrap()
    };
    let flipped = evaluate(
        &g3,
        &[
            &p.params,
            &p.running,
            &feeds(&[("neural", rev(&xn)), ("behavior", rev(&xb))]),
        ],
        Mode::Eval,
    )
    .unwrap();
    assert_eq!(rev(batch.value(hn3)), *flipped.value(hn3));
    assert_eq!(rev(batch.value(hb3)), *flipped.value(hb3));
    for i in 0..3 {
        let one = feeds(&[
            ("neural", Tensor::stack(&[xn.index_axis0(i)]).unwrap()),
            ("behavior", Tensor::stack(&[xb.index_axis0(i)]).unwrap()),
        ]);
        let e = evaluate(&g1, &[&p.params, &p.running, &one], Mode::Eval).unwrap();
        assert!(
            e.value(hn1)
                .max_abs_diff(&Tensor::stack(&[batch.value(hn3).index_axis0(i)]).unwrap())
                < 1e-12
        );
        assert!(
            e.value(hb1)
                .max_abs_diff(&Tensor::stack(&[batch.value(hb3).index_axis0(i)]).unwrap())
                < 1e-12
        );
    }
}

#[test]
fn zero_input_propagates_only_the_output_bias() {
    let mut p = init_params::<f64>(&small_config(), small_shape(), &[], 3).unwrap();
    let bias = random(&[6], 9);
    p.params.insert("fn.fc.bias".into(), bias.clone());
    let (g, hn, _) = encoder_graph(2);
    let input = feeds(&[
        ("neural", Tensor::zeros(&[2, 4, 16, 16])),
        ("behavior", Tensor::zeros(&[2, 4, 12])),
    ]);
    let e = evaluate(&g, &[&p.params, &p.running, &input], Mode::Eval).unwrap();
    let out = e.value(hn);
    for row in out.data().chunks(6) {
        assert_eq!(row, bias.data());
    }
}

fn attention_graph(t: usize, c: usize, mode: AttentionMode, k: usize) -> (Graph, NodeId) {
    let cfg = ModelConfig {
        attention: mode,
        attention_dim: k,
        ..ModelConfig::default()
    };
    let mut mb = ModelBuilder::<f64>::new(&cfg, small_shape()).unwrap();
    let s = mb.graph.input("s", &[1, c, t]).unwrap();
    let out = mb.attention_pool("att", s).unwrap();
    (mb.graph, out)
}

#[test]
fn literal_attention_over_one_frame_is_zero() {
    let (g, out) = attention_graph(1, 4, AttentionMode::Literal, 12);
    let f = feeds(&[
        ("s", random(&[1, 4, 1], 1)),
        ("att.w1", random(&[12, 4], 2)),
        ("att.w2", random(&[1, 12], 3)),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert!(e.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_w2_weights_every_frame_by_log_t() {
    let (g, out) = attention_graph(3, 4, AttentionMode::Literal, 12);
    let s = random(&[1, 4, 3], 4);
    let f = feeds(&[
        ("s", s.clone()),
        ("att.w1", random(&[12, 4], 5)),
        ("att.w2", Tensor::zeros(&[1, 12])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    for ch in 0..4 {
        let total: f64 = (0..3).map(|t| s.data()[ch * 3 + t]).sum();
        assert!((e.value(out).data()[ch] - 3f64.ln() * total).abs() < 1e-12);
    }
}

#[test]
fn two_frame_attention_hand_example() {
    // r = (ln 3, 0): S_1 = (a, b), S_2 = 0, one hidden unit
    let (g, out) = attention_graph(2, 2, AttentionMode::Literal, 1);
    let (a, b) = (0.8, -0.3);
    let s = Tensor::from_f64(&[1, 2, 2], &[a, 0.0, b, 0.0]).unwrap();
    let w1 = Tensor::from_f64(&[1, 2], &[0.5f64.atanh() / a, 0.0]).unwrap();
    let w2 = Tensor::from_f64(&[1, 1], &[2.0 * 3f64.ln()]).unwrap();
    let f = feeds(&[("s", s), ("att.w1", w1), ("att.w2", w2)]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    let w = -(0.75f64).ln();
    assert!((w - 0.28768).abs() < 1e-5);
    assert!((e.value(out).data()[0] - w * a).abs() < 1e-12);
    assert!((e.value(out).data()[1] - w * b).abs() < 1e-12);

    let (g, out) = attention_graph(2, 2, AttentionMode::Softmax, 1);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert!((e.value(out).data()[0] - 0.75 * a).abs() < 1e-12);
}

fn head_graph(cfg: &ModelConfig) -> (Graph, NodeId) {
    let mut mb = ModelBuilder::<f64>::new(cfg, small_shape()).unwrap();
    let h = mb.graph.input("h", &[4, cfg.embed_dim]).unwrap();
    let z = mb.projection_head("g", h).unwrap();
    (mb.graph, z)
}

#[test]
fn projection_is_unit_norm() {
    let cfg = small_config();
    let p = init_params::<f64>(&cfg, small_shape(), &[], 1).unwrap();
    let mut mb = ModelBuilder::<f64>::new(&cfg, small_shape()).unwrap();
    let h = mb.graph.input("h", &[5, 6]).unwrap();
    let z = mb.projection_head("gn", h).unwrap();
    let e = evaluate(
        &mb.graph,
        &[&p.params, &feeds(&[("h", random(&[5, 6], 3))])],
        Mode::Eval,
    )
    .unwrap();
    for row in e.value(z).data().chunks(6) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identity_projection_normalizes_input() {
    let cfg = small_config();
    let (g, z) = head_graph(&cfg);
    let h = random(&[4, 6], 6).map(|v| v.abs() + 0.1);
    let f = feeds(&[
        ("h", h.clone()),
        ("g.fc1.weight", Tensor::eye(6)),
        ("g.fc2.weight", Tensor::eye(6)),
        ("g.fc1.bias", Tensor::zeros(&[6])),
        ("g.fc2.bias", Tensor::zeros(&[6])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    for (zr, hr) in e.value(z).data().chunks(6).zip(h.data().chunks(6)) {
        let n: f64 = hr.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in zr.iter().zip(hr) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }
}

#[test]
fn norm_of_projection_has_zero_gradient() {
    let cfg = small_config();
    let p = init_params::<f64>(&cfg, small_shape(), &[], 1).unwrap();
    let mut mb = ModelBuilder::<f64>::new(&cfg, small_shape()).unwrap();
    let h = mb.graph.input("h", &[1, 6]).unwrap();
    let z = mb.projection_head("gn", h).unwrap();
    let sq = mb.graph.mul(z, z).unwrap();
    let total = mb.graph.sum_all(sq);
    let input = feeds(&[("h", random(&[1, 6], 12))]);
    let e = evaluate(&mb.graph, &[&p.params, &input], Mode::Eval).unwrap();
    let g = backward(&mb.graph, &e, total).unwrap();
    assert!(g.get("h").unwrap().data().iter().all(|v| v.abs() < 1e-12));
    let report = grad_check(&mb.graph, &[&p.params], &input, total, 1e-5, Mode::Eval).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn zero_pre_normalization_vector_is_error() {
    let cfg = small_config();
    let (g, _) = head_graph(&cfg);
    let f = feeds(&[
        ("h", random(&[4, 6], 1)),
        ("g.fc1.weight", Tensor::eye(6)),
        ("g.fc2.weight", Tensor::zeros(&[6, 6])),
        ("g.fc1.bias", Tensor::zeros(&[6])),
        ("g.fc2.bias", Tensor::zeros(&[6])),
    ]);
    let err = evaluate(&g, &[&f], Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("g.z"), "{err}");
}

#[test]
fn baseline_head_shapes() {
    let cfg = small_config();
    let s = small_shape();
    let heads = [
        Head::Classifier { classes: 6 },
        Head::Regression,
        Head::Discriminators { animals: 4 },
    ];
    let mut p = init_params::<f64>(&cfg, s, &heads, 0).unwrap();
    let mut mb = ModelBuilder::<f64>::new(&cfg, s).unwrap();
    let h = mb.graph.input("h", &[3, 6]).unwrap();
    let logits = mb.classifier("cls", h, 6).unwrap();
    let dec = mb.regression_decoder(h).unwrap();
    let disc = mb.discriminator("disc_n", h, 4).unwrap();
    assert_eq!(mb.graph.shape(dec), &[3, 4, 12]);
    assert_eq!(mb.graph.shape(disc), &[3, 4]);
    for b in ["cls.fc1.bias", "cls.fc2.bias", "cls.fc3.bias"] {
        assert!(p.params[b].data().iter().all(|&v| v == 0.0));
    }
    p.params.insert("h".into(), Tensor::zeros(&[3, 6]));
    let e = evaluate(&mb.graph, &[&p.params], Mode::Eval).unwrap();
    assert!(e.value(logits).data().iter().all(|&v| v == 0.0));
    assert_eq!(e.value(logits).shape(), &[3, 6]);
}

fn end_to_end_check(neural: bool) -> f64 {
    let cfg = small_config();
    let s = small_shape();
    let p = init_params::<f64>(&cfg, s, &[], 21).unwrap();
    let mut mb = ModelBuilder::<f64>::new(&cfg, s).unwrap();
    let (x, h, name, prefix) = if neural {
        let x = mb.graph.input("x", &[3, 4, 16, 16]).unwrap();
        (x, mb.neural_encoder(x).unwrap(), "x", "gn")
    } else {
        let x = mb.graph.input("x", &[3, 4, 12]).unwrap();
        (x, mb.behavior_encoder(x).unwrap(), "x", "gb")
    };
    let _ = x;
    let z = mb.projection_head(prefix, h).unwrap();
    let target = mb.graph.constant(random(&[3, 6], 30));
    let prod = mb.graph.mul(z, target).unwrap();
    let loss = mb.graph.sum_all(prod);
    let shape: Vec<usize> = if neural {
        vec![3, 4, 16, 16]
    } else {
        vec![3, 4, 12]
    };
    let input = feeds(&[(name, random(&shape, 31))]);
    let used: TensorMap = p
        .params
        .iter()
        .filter(|(k, _)| mb.graph.leaf(k).is_some())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let r = grad_check(&mb.graph, &[&input], &used, loss, 1e-5, Mode::Train).unwrap();
    r.max_rel_error
}

#[test]
fn behavior_stack_matches_finite_differences() {
    let e = end_to_end_check(false);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn neural_stack_matches_finite_differences() {
    let e = end_to_end_check(true);
    assert!(e < 1e-4, "max relative error {e}");
}
