use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{Tensor, TensorMap};

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_f64(shape, v).unwrap()
}

fn feeds(pairs: &[(&str, Tensor)]) -> TensorMap {
    pairs
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]).unwrap();
    let y = g.relu(x);
    let e = evaluate(
        &g,
        &[&feeds(&[("x", t(&[3], &[-1.0, 0.0, 2.0]))])],
        Mode::Eval,
    )
    .unwrap();
    assert_eq!(e.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let a = g.input("a", &[2, 2]).unwrap();
    let b = g.input("b", &[2, 2]).unwrap();
    let c = g.matmul(a, b).unwrap();
    let f = feeds(&[
        ("a", Tensor::eye(2)),
        ("b", t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert_eq!(e.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input("x", &[2]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let e = evaluate(&g, &[&feeds(&[("x", t(&[2], &[0.0, 0.0]))])], Mode::Eval).unwrap();
    assert_eq!(e.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", &[]).unwrap();
    let y = g.mul(x, x).unwrap();
    let f = feeds(&[("x", Tensor::scalar(3.0))]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    let gr = backward(&g, &e, y).unwrap();
    assert_eq!(gr.get("x").unwrap().item(), 6.0);
}

#[test]
fn relu_sum_subgradient() {
    let mut g = Graph::new();
    let x = g.param("x", &[2]).unwrap();
    let r = g.relu(x);
    let s = g.sum_all(r);
    let f = feeds(&[("x", t(&[2], &[-1.0, 2.0]))]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert_eq!(
        backward(&g, &e, s).unwrap().get("x").unwrap().data(),
        &[0.0, 1.0]
    );
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param("x", &[1]).unwrap();
    let r = g.relu(x);
    let s = g.sum_all(r);
    let e = evaluate(&g, &[&feeds(&[("x", t(&[1], &[0.0]))])], Mode::Eval).unwrap();
    assert_eq!(
        backward(&g, &e, s).unwrap().get("x").unwrap().data(),
        &[0.0]
    );
}

#[test]
fn non_scalar_seed_is_rejected() {
    let mut g = Graph::new();
    let x = g.param("x", &[2]).unwrap();
    let y = g.relu(x);
    let e = evaluate(&g, &[&feeds(&[("x", t(&[2], &[1.0, 2.0]))])], Mode::Eval).unwrap();
    assert!(matches!(
        backward(&g, &e, y),
        Err(Error::NonScalarSeed { .. })
    ));
}

#[test]
fn unreached_param_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", &[2]).unwrap();
    let _unused = g.param("w", &[3]).unwrap();
    let s = g.sum_all(x);
    let f = feeds(&[
        ("x", t(&[2], &[1.0, 2.0])),
        ("w", t(&[3], &[1.0, 1.0, 1.0])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert_eq!(
        backward(&g, &e, s).unwrap().get("w").unwrap().data(),
        &[0.0; 3]
    );
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let x = g.input("frames", &[2, 3]).unwrap();
    g.relu(x);
    let err = evaluate(
        &g,
        &[&feeds(&[("frames", t(&[3], &[1.0, 2.0, 3.0]))])],
        Mode::Eval,
    )
    .unwrap_err();
    match err {
        Error::Shape { node, .. } => assert_eq!(node, "frames"),
        other => panic!("unexpected {other:?}"),
    }
    let mut g2: Graph = Graph::new();
    let a = g2.input("a", &[2, 3]).unwrap();
    let b = g2.input("b", &[2, 3]).unwrap();
    assert!(matches!(g2.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_intermediate_names_the_node() {
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let l = g.log(x);
    g.label(l, "logit");
    let err = evaluate(&g, &[&feeds(&[("x", t(&[1], &[0.0]))])], Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::NonFinite { node } if node == "logit"));
}

#[test]
fn unbound_input_is_error() {
    let mut g: Graph = Graph::new();
    g.input("x", &[1]).unwrap();
    assert!(matches!(
        evaluate(&g, &[], Mode::Eval),
        Err(Error::Unbound(_))
    ));
}

#[test]
fn max_pool_ties_route_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.param("x", &[1, 1, 4]).unwrap();
    let p = g.max_pool1d(x, 2).unwrap();
    let s = g.sum_all(p);
    let e = evaluate(
        &g,
        &[&feeds(&[("x", t(&[1, 1, 4], &[2.0, 2.0, 1.0, 1.0]))])],
        Mode::Eval,
    )
    .unwrap();
    let gr = backward(&g, &e, s).unwrap();
    assert_eq!(gr.get("x").unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn grad_reverse_scales_and_negates() {
    let mut g = Graph::new();
    let x = g.param("x", &[3]).unwrap();
    let r = g.grad_reverse(x, 10.0).unwrap();
    let w = g.input("w", &[3]).unwrap();
    let m = g.mul(r, w).unwrap();
    let s = g.sum_all(m);
    let f = feeds(&[
        ("x", t(&[3], &[1.0, 2.0, 3.0])),
        ("w", t(&[3], &[0.5, -1.0, 2.0])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    assert_eq!(e.value(r).data(), &[1.0, 2.0, 3.0]);
    let gr = backward(&g, &e, s).unwrap();
    assert_eq!(gr.get("x").unwrap().data(), &[-5.0, 10.0, -20.0]);
}

#[test]
fn grad_reverse_equals_negated_scaled_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let lambda = 2.5;
    let build = |rev: bool| {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 3]).unwrap();
        let h = if rev {
            g.grad_reverse(x, lambda).unwrap()
        } else {
            x
        };
        let t = g.tanh(h);
        let c = g.input("c", &[2, 3]).unwrap();
        let m = g.mul(t, c).unwrap();
        let s = g.sum_all(m);
        (g, s)
    };
    let params = feeds(&[("x", random(&[2, 3], &mut rng))]);
    let inputs = feeds(&[("c", random(&[2, 3], &mut rng))]);
    let (plain, sp) = build(false);
    let (rev, sr) = build(true);
    let r = grad_check(&plain, &[&inputs], &params, sp, 1e-5, Mode::Train).unwrap();
    assert!(r.max_rel_error < 1e-8);
    let ep = evaluate(&plain, &[&params, &inputs], Mode::Train).unwrap();
    let er = evaluate(&rev, &[&params, &inputs], Mode::Train).unwrap();
    assert_eq!(ep.value(sp).item(), er.value(sr).item());
    let gp = backward(&plain, &ep, sp).unwrap();
    let gr = backward(&rev, &er, sr).unwrap();
    for (a, b) in gr
        .get("x")
        .unwrap()
        .data()
        .iter()
        .zip(gp.get("x").unwrap().data())
    {
        assert!((a + lambda * b).abs() < 1e-12);
    }
    // lambda = 0 blocks the gradient entirely
    let mut g = Graph::new();
    let x = g.param("x", &[2, 3]).unwrap();
    let h = g.grad_reverse(x, 0.0).unwrap();
    let s = g.sum_all(h);
    let e = evaluate(&g, &[&params], Mode::Train).unwrap();
    assert!(backward(&g, &e, s)
        .unwrap()
        .get("x")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 1]).unwrap();
    let ga = g.param("g", &[1]).unwrap();
    let be = g.param("b", &[1]).unwrap();
    let y = g.batch_norm(x, ga, be, 1e-5, "rm", "rv").unwrap();
    let f = feeds(&[
        ("x", t(&[2, 1], &[1.0, 3.0])),
        ("g", t(&[1], &[1.0])),
        ("b", t(&[1], &[0.0])),
        ("rm", t(&[1], &[1.0])),
        ("rv", t(&[1], &[4.0])),
    ]);
    let e = evaluate(&g, &[&f], Mode::Eval).unwrap();
    let want = 2.0 / (4.0f64 + 1e-5).sqrt();
    assert!((e.value(y).data()[1] - want).abs() < 1e-15);
    let tr = evaluate(&g, &[&f], Mode::Train).unwrap();
    assert_eq!(tr.bn_updates().len(), 1);
    assert_eq!(tr.bn_updates()[0].mean, vec![2.0]);
    assert_eq!(tr.bn_updates()[0].var, vec![1.0]);
}

#[test]
fn l2_normalize_has_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.input("x", &[5, 7]).unwrap();
    let y = g.l2_normalize(x, 1).unwrap();
    for _ in 0..20 {
        let e = evaluate(
            &g,
            &[&feeds(&[("x", random(&[5, 7], &mut rng))])],
            Mode::Eval,
        )
        .unwrap();
        for row in e.value(y).data().chunks(7) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn evaluation_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.input("x", &[2, 3, 6, 6]).unwrap();
    let w = g.param("w", &[4, 3, 3, 3]).unwrap();
    let c = g.conv2d(x, w, 1, 1).unwrap();
    let p = g.max_pool2d(c, 2).unwrap();
    let s = g.sum_all(p);
    let f = feeds(&[
        ("x", random(&[2, 3, 6, 6], &mut rng)),
        ("w", random(&[4, 3, 3, 3], &mut rng)),
    ]);
    let a = evaluate(&g, &[&f], Mode::Train).unwrap();
    let b = evaluate(&g, &[&f], Mode::Train).unwrap();
    assert_eq!(a.value(s).item().to_bits(), b.value(s).item().to_bits());
}

/// A three-layer network with random weights; gradients against central
/// differences with step 1e-5.
#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input("x", &[4, 5]).unwrap();
    let mut h = x;
    let dims = [5, 6, 4, 3];
    let mut params = TensorMap::new();
    for l in 0..3 {
        let w = g.param(&format!("w{l}"), &[dims[l], dims[l + 1]]).unwrap();
        let b = g.param(&format!("b{l}"), &[dims[l + 1]]).unwrap();
        params.insert(format!("w{l}"), random(&[dims[l], dims[l + 1]], &mut rng));
        params.insert(format!("b{l}"), random(&[dims[l + 1]], &mut rng));
        h = g.linear(h, w, Some(b)).unwrap();
        if l < 2 {
            h = g.tanh(h);
        }
    }
    let sq = g.mul(h, h).unwrap();
    let loss = g.mean_all(sq);
    let inputs = feeds(&[("x", random(&[4, 5], &mut rng))]);
    let r = grad_check(&g, &[&inputs], &params, loss, 1e-5, Mode::Train).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn linear_layer_grad_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.input("x", &[3, 4]).unwrap();
    let w = g.param("w", &[4, 2]).unwrap();
    let b = g.param("b", &[2]).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    let c = g.input("c", &[3, 2]).unwrap();
    let m = g.mul(y, c).unwrap();
    let loss = g.sum_all(m);
    let params = feeds(&[
        ("w", random(&[4, 2], &mut rng)),
        ("b", random(&[2], &mut rng)),
    ]);
    let inputs = feeds(&[
        ("x", random(&[3, 4], &mut rng)),
        ("c", random(&[3, 2], &mut rng)),
    ]);
    let r = grad_check(&g, &[&inputs], &params, loss, 1e-5, Mode::Train).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn batchnorm_training_mode_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.param("x", &[4, 3, 5]).unwrap();
    let ga = g.param("gamma", &[3]).unwrap();
    let be = g.param("beta", &[3]).unwrap();
    let y = g.batch_norm(x, ga, be, 1e-5, "rm", "rv").unwrap();
    let c = g.input("c", &[4, 3, 5]).unwrap();
    let t2 = g.tanh(y);
    let m = g.mul(t2, c).unwrap();
    let loss = g.sum_all(m);
    let params = feeds(&[
        ("x", random(&[4, 3, 5], &mut rng)),
        ("gamma", random(&[3], &mut rng)),
        ("beta", random(&[3], &mut rng)),
    ]);
    let inputs = feeds(&[("c", random(&[4, 3, 5], &mut rng))]);
    let r = grad_check(&g, &[&inputs], &params, loss, 1e-5, Mode::Train).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn every_operator_matches_finite_differences(kind in 0usize..21, seed in 0u64..10_000) {
        let err = crate::verify::operator_gradient_error(kind, seed).unwrap();
        prop_assert!(err < 1e-4, "op {kind} seed {seed}: {err}");
    }

    #[test]
    fn random_compositions_match_finite_differences(depth in 1usize..=5, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.param("x", &[3, 4]).unwrap();
        let mut params = TensorMap::new();
        params.insert("x".into(), random(&[3, 4], &mut rng));
        let mut h = x;
        for d in 0..depth {
            h = match rng.gen_range(0..5) {
                0 => g.tanh(h),
                1 => g.softmax(h, 1).unwrap(),
                2 => {
                    let w = g.param(&format!("w{d}"), &[4, 4]).unwrap();
                    params.insert(format!("w{d}"), random(&[4, 4], &mut rng));
                    g.matmul(h, w).unwrap()
                }
                3 => { let s = g.mul(h, h).unwrap(); g.scale(s, 0.5) }
                _ => g.l2_normalize(h, 1).unwrap(),
            };
        }
        let c = g.input("c", &[3, 4]).unwrap();
        let m = g.mul(h, c).unwrap();
        let loss = g.sum_all(m);
        let inputs = feeds(&[("c", random(&[3, 4], &mut rng))]);
        let r = grad_check(&g, &[&inputs], &params, loss, 1e-5, Mode::Train).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}
