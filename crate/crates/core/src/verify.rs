//! Self-contained invariant suite: gradient checks, loss closed forms,
//! augmentation oracles and calcium-model identities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    behavior_jitter, calcium_augment, calcium_kernel, neural_jitter, swap_augment,
    swap_distribution, AugmentConfig, Donor, Normalization, SwapConfig, SwapIndex, WindowSpan,
};
use crate::autodiff::{backward, evaluate, grad_check, Graph, Mode, NodeId};
use crate::encoders::{init_params, Head, InputShape, ModelBuilder, ModelConfig};
use crate::error::Result;
use crate::objectives::{
    domain_masked_nce, info_nce_symmetric, mmd, nce_graph, nce_one_direction_graph, MaskSides,
};
use crate::synthgen::{calcium_transform, dff};
use crate::tensor::{Tensor, TensorMap};

/// Finite-difference tolerance on the relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub const OPERATORS: [&str; 21] = [
    "add",
    "mul",
    "matmul",
    "conv1d",
    "conv2d",
    "max_pool1d",
    "max_pool2d",
    "batch_norm",
    "relu",
    "tanh",
    "softmax",
    "exp_log",
    "neg_add_scalar",
    "sum",
    "mean",
    "l2_normalize",
    "concat",
    "slice",
    "grad_reverse",
    "permute",
    "sub_reshape_scale",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    /// Suite name to pass/fail.
    pub fn summary(&self) -> BTreeMap<String, bool> {
        self.suites
            .iter()
            .map(|s| (s.name.clone(), s.passed))
            .collect()
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
        }
    }

    fn record(&mut self, name: impl Into<String>, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            passed: self.checks.iter().all(|c| c.passed),
            checks: self.checks,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (
        err < tol,
        format!("max error {err:.3e} (tolerance {tol:.0e})"),
    )
}

/// Maximum relative gradient error of operator `kind` (an index into
/// [`OPERATORS`]) on a random instance drawn from `seed`.
///
/// The loss is `sum(op(x) * c)` for random `c`. Gradient reversal is compared
/// against `-lambda` times the finite difference of its identity forward pass.
pub fn operator_gradient_error(kind: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut params = TensorMap::new();
    let mut p = |g: &mut Graph, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
        params.insert(name.to_string(), random(shape, rng));
        g.param(name, shape)
    };
    let (a, b) = (rng.gen_range(1..4), rng.gen_range(2..5));
    let lambda = 0.7;
    let y = match kind {
        0 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let z = p(&mut g, "z", &[b], &mut rng)?;
            g.add(x, z)?
        }
        1 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let z = p(&mut g, "z", &[a, 1], &mut rng)?;
            g.mul(x, z)?
        }
        2 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let z = p(&mut g, "z", &[b, 3], &mut rng)?;
            g.matmul(x, z)?
        }
        3 => {
            let x = p(&mut g, "x", &[2, 2, 5 + a], &mut rng)?;
            let w = p(&mut g, "w", &[3, 2, 3], &mut rng)?;
            g.conv1d(x, w, 1)?
        }
        4 => {
            let x = p(&mut g, "x", &[2, 2, 4 + a, 5], &mut rng)?;
            let w = p(&mut g, "w", &[2, 2, 3, 3], &mut rng)?;
            g.conv2d(x, w, 1 + (seed as usize % 2), 1)?
        }
        5 => {
            let x = p(&mut g, "x", &[2, 3, 6], &mut rng)?;
            g.max_pool1d(x, 2)?
        }
        6 => {
            let x = p(&mut g, "x", &[2, 2, 4, 4], &mut rng)?;
            g.max_pool2d(x, 2)?
        }
        7 => {
            let x = p(&mut g, "x", &[a + 1, b, 3], &mut rng)?;
            let ga = p(&mut g, "g", &[b], &mut rng)?;
            let be = p(&mut g, "be", &[b], &mut rng)?;
            g.batch_norm(x, ga, be, 1e-5, "rm", "rv")?
        }
        8 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            g.relu(x)
        }
        9 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            g.tanh(x)
        }
        10 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            g.softmax(x, 1)?
        }
        11 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let e = g.exp(x);
            g.log(e)
        }
        12 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let e = g.exp(x);
            let n = g.neg(e);
            g.add_scalar(n, 0.5)
        }
        13 => {
            let x = p(&mut g, "x", &[a, b, 2], &mut rng)?;
            g.sum(x, Some(1), false)?
        }
        14 => {
            let x = p(&mut g, "x", &[a, b, 2], &mut rng)?;
            g.mean(x, Some(2), true)?
        }
        15 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            g.l2_normalize(x, 1)?
        }
        16 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let z = p(&mut g, "z", &[a, 2], &mut rng)?;
            g.concat(&[x, z], 1)?
        }
        17 => {
            let x = p(&mut g, "x", &[a, b + 2], &mut rng)?;
            g.slice(x, 1, 1, b + 1)?
        }
        18 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let t = g.tanh(x);
            g.grad_reverse(t, lambda)?
        }
        19 => {
            let x = p(&mut g, "x", &[2, a, b], &mut rng)?;
            g.permute(x, &[2, 0, 1])?
        }
        20 => {
            let x = p(&mut g, "x", &[a, b], &mut rng)?;
            let z = p(&mut g, "z", &[a, b], &mut rng)?;
            let d = g.sub(x, z)?;
            let r = g.reshape(d, &[a * b])?;
            g.scale(r, -1.5)
        }
        _ => {
            return Err(crate::Error::invalid(format!(
                "no operator with index {kind}"
            )))
        }
    };
    let shape = g.shape(y).to_vec();
    let c = g.input("c", &shape)?;
    let m = g.mul(y, c)?;
    let loss = g.sum_all(m);
    let inputs: TensorMap = [("c".to_string(), random(&shape, &mut rng))]
        .into_iter()
        .collect();
    // keep log() away from the origin
    if kind == 11 {
        for v in params.get_mut("x").expect("x exists").data_mut() {
            *v = v.abs() + 0.5;
        }
    }
    if kind == 18 {
        return reversed_gradient_error(&g, &inputs, &params, loss, lambda);
    }
    Ok(grad_check(&g, &[&inputs], &params, loss, 1e-5, Mode::Train)?.max_rel_error)
}

fn reversed_gradient_error(
    g: &Graph,
    inputs: &TensorMap,
    params: &TensorMap,
    loss: NodeId,
    lambda: f64,
) -> Result<f64> {
    let eval = evaluate(g, &[params, inputs], Mode::Train)?;
    let grads = backward(g, &eval, loss)?;
    let analytic = grads.get("x").expect("x is a leaf");
    let eps = 1e-5;
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params["x"].len() {
        let orig = params["x"].data()[i];
        let mut at = |v: f64| -> Result<f64> {
            work.get_mut("x").expect("x exists").data_mut()[i] = v;
            Ok(evaluate(g, &[&work, inputs], Mode::Train)?
                .value(loss)
                .item())
        };
        let numeric = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
        at(orig)?;
        let want = -lambda * numeric;
        worst = worst.max((analytic.data()[i] - want).abs() / want.abs().max(1.0));
    }
    Ok(worst)
}

/// Reduced model used for the encoder gradient checks.
pub fn reduced_model() -> (ModelConfig, InputShape) {
    (
        ModelConfig {
            embed_dim: 6,
            attention_dim: 3,
            spatial_channels: vec![2, 3, 2, 2, 2, 2],
            frame_dim: 5,
            temporal_channels: vec![4, 3, 4, 3, 5],
            hidden_dim: 5,
            ..ModelConfig::default()
        },
        InputShape {
            pose_dim: 12,
            image_extent: 16,
            neural_len: 4,
            behavior_len: 4,
        },
    )
}

/// Maximum relative gradient error of one full encoder stack (encoder,
/// projection head and a 4-animal discriminator) under a symmetric NCE plus
/// discriminator loss, one window per animal.
pub fn encoder_gradient_error(neural: bool, seed: u64) -> Result<f64> {
    const ANIMALS: usize = 4;
    let (cfg, shape) = reduced_model();
    let params = init_params::<f64>(
        &cfg,
        shape,
        &[Head::Discriminators { animals: ANIMALS }],
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut mb = ModelBuilder::<f64>::new(&cfg, shape)?;
    let x_shape = if neural {
        vec![
            ANIMALS,
            shape.neural_len,
            shape.image_extent,
            shape.image_extent,
        ]
    } else {
        vec![ANIMALS, shape.behavior_len, shape.pose_dim]
    };
    let x = mb.graph.input("x", &x_shape)?;
    let (h, prefix, disc) = if neural {
        (mb.neural_encoder(x)?, "gn", "disc_n")
    } else {
        (mb.behavior_encoder(x)?, "gb", "disc_b")
    };
    let z = mb.projection_head(prefix, h)?;
    let partner = mb.graph.input("partner", &[ANIMALS, cfg.embed_dim])?;
    let nce = nce_graph(&mut mb.graph, z, partner, 0.5, None, MaskSides::None)?;
    let logits = mb.discriminator(disc, h, ANIMALS)?;
    let target = mb.graph.input("target", &[ANIMALS, ANIMALS])?;
    let ce = crate::objectives::cross_entropy_graph(&mut mb.graph, logits, target)?;
    let loss = mb.graph.add(nce, ce)?;

    let mut p = random(&[ANIMALS, cfg.embed_dim], &mut rng);
    for row in p.data_mut().chunks_mut(cfg.embed_dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let inputs: TensorMap = [
        ("x".to_string(), random(&x_shape, &mut rng)),
        ("partner".to_string(), p),
        ("target".to_string(), Tensor::eye(ANIMALS)),
    ]
    .into_iter()
    .collect();
    let used: TensorMap = params
        .params
        .iter()
        .filter(|(k, _)| mb.graph.leaf(k).is_some())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(grad_check(&mb.graph, &[&inputs], &used, loss, 1e-5, Mode::Train)?.max_rel_error)
}

pub fn gradient_suite() -> SuiteReport {
    let mut s = Suite::new("gradients");
    for (kind, name) in OPERATORS.iter().enumerate() {
        let worst = (0..3).try_fold(0.0f64, |w, seed| {
            Ok(w.max(operator_gradient_error(kind, seed)?))
        });
        s.record(
            format!("operator {name}"),
            worst.map(|e| within(e, GRADIENT_TOLERANCE)),
        );
    }
    s.record(
        "behavior encoder stack",
        encoder_gradient_error(false, 1).map(|e| within(e, GRADIENT_TOLERANCE)),
    );
    s.record(
        "neural encoder stack",
        encoder_gradient_error(true, 1).map(|e| within(e, GRADIENT_TOLERANCE)),
    );
    s.finish()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(&[n, d], rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

pub fn loss_suite() -> SuiteReport {
    let mut s = Suite::new("losses");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    s.record("single pair gives zero", {
        let z = unit_rows(1, 5, &mut rng);
        info_nce_symmetric(&z, &z, 0.1).map(|l| within(l.abs(), 1e-10))
    });
    s.record("orthonormal pair", {
        let z = Tensor::eye(2);
        let want = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        info_nce_symmetric(&z, &z, 1.0).map(|l| within((l - want).abs(), 1e-10))
    });
    s.record("mask over one domain equals unmasked", {
        let (zb, zn) = (unit_rows(6, 4, &mut rng), unit_rows(6, 4, &mut rng));
        (|| {
            let mut g = Graph::new();
            let b = g.input("zb", &[6, 4])?;
            let n = g.input("zn", &[6, 4])?;
            let seed = nce_one_direction_graph(&mut g, b, n, 0.2, None)?;
            let f: TensorMap = [
                ("zb".to_string(), zb.clone()),
                ("zn".to_string(), zn.clone()),
            ]
            .into_iter()
            .collect();
            let plain = evaluate(&g, &[&f], Mode::Eval)?.value(seed).item();
            let masked = domain_masked_nce(&zb, &zn, &[3; 6], 0.2)?;
            Ok((
                plain.to_bits() == masked.to_bits(),
                format!("{plain} vs {masked}"),
            ))
        })()
    });
    s.record("single-point mmd", {
        let x = random(&[1, 3], &mut rng);
        let y = random(&[1, 3], &mut rng);
        let bw = [0.5, 1.0, 2.0];
        let d2: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let k = bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / 3.0;
        mmd(&x, &y, &bw).map(|v| within((v - (2.0 - 2.0 * k)).abs(), 1e-10))
    });
    s.finish()
}

fn dyadic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| f64::from(rng.gen_range(-64i32..64)) / 8.0)
        .collect()
}

pub fn augmentation_suite() -> SuiteReport {
    let mut s = Suite::new("augmentations");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    s.record(
        "swap distribution equals enumeration",
        (|| {
            let dim = 6;
            let sizes = [500usize, 37, 1];
            let poses: BTreeMap<u32, Vec<f64>> = sizes
                .iter()
                .enumerate()
                .map(|(a, &n)| (a as u32, random(&[n, dim], &mut rng).data().to_vec()))
                .collect();
            let cfg = SwapConfig {
                normalization: Normalization::FullDomain,
                ..SwapConfig::default()
            };
            let index = SwapIndex::build(poses.clone(), dim, &cfg)?;
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let q = random(&[dim], &mut rng);
                for (&a, pool) in &poses {
                    let c = swap_distribution(q.data(), a, &index)?;
                    let weights: Vec<f64> = pool
                        .chunks(dim)
                        .map(|b| {
                            (-b.iter()
                                .zip(q.data())
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                                .sqrt())
                            .exp()
                        })
                        .collect();
                    let total: f64 = weights.iter().sum();
                    for (&i, &p) in c.indices.iter().zip(&c.probabilities) {
                        worst = worst.max((p - weights[i] / total).abs());
                    }
                    if c.indices.len() != weights.len() {
                        return Ok((
                            false,
                            format!(
                                "{} candidates for a domain of {}",
                                c.indices.len(),
                                weights.len()
                            ),
                        ));
                    }
                }
            }
            Ok(within(worst, 1e-10))
        })(),
    );
    s.record(
        "calcium augmentation adds the kernel convolution",
        (|| {
            let (t, f) = (12, 9);
            for anchor in [0, 5] {
                for gamma in [0.75, 0.5] {
                    let window = Tensor::new(&[t, f], dyadic(t * f, &mut rng))?;
                    let donor = dyadic(f, &mut rng);
                    let span = WindowSpan {
                        animal_id: 2,
                        trial: 0,
                        start: 100,
                        len: t,
                    };
                    let d = Donor {
                        animal_id: 2,
                        trial: 0,
                        frame: 40,
                        data: &donor,
                    };
                    let out = calcium_augment(&window, span, &d, gamma, anchor)?;
                    // brute force: impulse train with the donor at `anchor`, convolved with γ^k
                    let mut impulse = vec![0.0; t * f];
                    impulse[anchor * f..(anchor + 1) * f].copy_from_slice(&donor);
                    for step in 0..t {
                        for p in 0..f {
                            let mut conv = 0.0;
                            for src in 0..=step {
                                conv += gamma.powi((step - src) as i32) * impulse[src * f + p];
                            }
                            let i = step * f + p;
                            if out.data()[i] - window.data()[i] != conv {
                                return Ok((
                                    false,
                                    format!("gamma {gamma} anchor {anchor} frame {step} pixel {p}"),
                                ));
                            }
                        }
                    }
                }
            }
            Ok((true, "exact".to_string()))
        })(),
    );
    s.record(
        "calcium kernel geometric sums",
        (|| {
            let mut worst: f64 = 0.0;
            for gamma in [0.0, 0.3, 0.9, 0.957] {
                for len in [1usize, 7, 64] {
                    let k = calcium_kernel(gamma, len)?;
                    let sum: f64 = k.iter().sum();
                    let closed = (1.0 - f64::powi(gamma, len as i32)) / (1.0 - gamma);
                    worst = worst.max((sum - closed).abs());
                }
            }
            Ok(within(worst, 1e-12))
        })(),
    );
    s.record(
        "zero strength is identity",
        (|| {
            let id = AugmentConfig::identity();
            let neural = Tensor::new(
                &[4, 8, 8],
                random(&[256], &mut rng)
                    .data()
                    .iter()
                    .map(|v| v + 2.0)
                    .collect(),
            )?;
            let behavior = random(&[8, 6], &mut rng);
            let poses: BTreeMap<u32, Vec<f64>> = (0..2)
                .map(|a| (a, random(&[20, 6], &mut rng).data().to_vec()))
                .collect();
            let index = SwapIndex::build(poses, 6, &id.swap)?;
            let zero = vec![0.0; 64];
            let span = WindowSpan {
                animal_id: 0,
                trial: 0,
                start: 10,
                len: 4,
            };
            let donor = Donor {
                animal_id: 0,
                trial: 0,
                frame: 0,
                data: &zero,
            };
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let results = [
                (
                    "neural jitter",
                    bits(&neural_jitter(&neural, &id.neural, &mut rng)?) == bits(&neural),
                ),
                (
                    "behavior jitter",
                    bits(&behavior_jitter(&behavior, &id.behavior, &mut rng)?) == bits(&behavior),
                ),
                (
                    "swap",
                    bits(&swap_augment(
                        &behavior,
                        0,
                        &index,
                        id.swap.probability,
                        &mut rng,
                    )?) == bits(&behavior),
                ),
                (
                    "calcium",
                    bits(&calcium_augment(&neural, span, &donor, 0.9, 0)?) == bits(&neural),
                ),
            ];
            let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
            Ok((
                failed.is_empty(),
                if failed.is_empty() {
                    "bit-identical".into()
                } else {
                    format!("changed: {failed:?}")
                },
            ))
        })(),
    );
    s.finish()
}

pub fn calcium_suite() -> SuiteReport {
    let mut s = Suite::new("calcium");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    s.record(
        "transform equals direct recursion",
        (|| {
            let (t_len, units) = (10_000, 2);
            let spikes: Vec<f64> = (0..t_len * units)
                .map(|_| f64::from(u8::from(rng.gen_bool(0.05))))
                .collect();
            let (gamma, alpha) = (0.957, 1.0);
            let out =
                calcium_transform(&Tensor::new(&[t_len, units], spikes.clone())?, gamma, alpha)?;
            for u in 0..units {
                let mut level = 0.0;
                for t in 0..t_len {
                    level = gamma * level + alpha * spikes[t * units + u];
                    if out.data()[t * units + u] != level {
                        return Ok((false, format!("unit {u} differs at step {t}")));
                    }
                }
            }
            Ok((true, "exact".to_string()))
        })(),
    );
    s.record(
        "dff of constant input is zero",
        (|| {
            for _ in 0..5 {
                let c = rng.gen_range(0.01..500.0);
                let out = dff(&Tensor::full(&[50, 3, 3], c), 15)?;
                if let Some(v) = out.data().iter().find(|v| **v != 0.0) {
                    return Ok((false, format!("constant {c} gave {v}")));
                }
            }
            Ok((true, "identically zero".to_string()))
        })(),
    );
    s.finish()
}

/// Every suite.
pub fn run_all() -> VerifyReport {
    let suites = vec![
        gradient_suite(),
        loss_suite(),
        augmentation_suite(),
        calcium_suite(),
    ];
    VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}
