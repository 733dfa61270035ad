//! Training losses as graph builders, plus value-level wrappers that check
//! their preconditions and evaluate a one-off graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate, Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_d: f64,
    pub lambda_mmd: f64,
    /// Kernel bandwidths as multiples of the median pairwise distance.
    pub mmd_bandwidths: Vec<f64>,
    /// Epochs trained on the contrastive loss alone before adaptation starts.
    pub warm_start_epochs: usize,
    /// Apply the same-domain mask to both contrastive directions (otherwise
    /// only behavior-to-neural is masked).
    pub mask_both_directions: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_d: 10.0,
            lambda_mmd: 1.0,
            mmd_bandwidths: vec![0.5, 1.0, 2.0],
            warm_start_epochs: 10,
            mask_both_directions: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(self.lambda_d >= 0.0) || !(self.lambda_mmd >= 0.0) {
            return Err(Error::config("loss.lambda", "must be >= 0"));
        }
        if self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::config(
                "loss.mmd_bandwidths",
                "need positive entries",
            ));
        }
        Ok(())
    }
}

/// Which contrastive directions see the same-domain mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSides {
    None,
    BehaviorToNeural,
    Both,
}

/// Symmetric contrastive loss over `[N, D]` unit rows:
/// `Σ_i [lse_k(L_ik) - L_ii] + [lse_k(L_ki) - L_ii]` with `L = Zb Znᵀ / τ`.
///
/// Each direction's denominator is optionally restricted by the `[N, N]`
/// 0/1 matrix `mask` (which must be symmetric with a unit diagonal).
pub fn nce_graph<S: Scalar>(
    g: &mut Graph<S>,
    zb: NodeId,
    zn: NodeId,
    tau: S,
    mask: Option<NodeId>,
    sides: MaskSides,
) -> Result<NodeId> {
    let inv_tau = S::one() / tau;
    let znt = g.transpose(zn)?;
    let sim = g.matmul(zb, znt)?;
    let logits = g.scale(sim, inv_tau);
    let logits = g.label(logits, "nce.logits");
    // every logit is at most 1/τ for unit rows, so shifting keeps exp bounded
    let shifted = g.add_scalar(logits, -inv_tau);
    let e = g.exp(shifted);
    let masked = match mask {
        Some(m) if sides != MaskSides::None => Some(g.mul(e, m)?),
        _ => None,
    };
    let (e_bn, e_nb) = match (sides, masked) {
        (MaskSides::Both, Some(m)) => (m, m),
        (MaskSides::BehaviorToNeural, Some(m)) => (m, e),
        _ => (e, e),
    };
    let den_bn = g.sum(e_bn, Some(1), false)?;
    let den_nb = g.sum(e_nb, Some(0), false)?;
    let lse_bn = g.log(den_bn);
    let lse_nb = g.log(den_nb);
    let lse = g.add(lse_bn, lse_nb)?;
    let pos = g.mul(zb, zn)?;
    let pos = g.sum(pos, Some(1), false)?;
    let pos = g.scale(pos, inv_tau + inv_tau);
    let per_pair = g.sub(lse, pos)?;
    let per_pair = g.add_scalar(per_pair, inv_tau + inv_tau);
    let loss = g.sum_all(per_pair);
    Ok(g.label(loss, "nce"))
}

/// One-directional (behavior-to-neural) contrastive loss with an optional
/// same-domain mask on the denominator.
pub fn nce_one_direction_graph<S: Scalar>(
    g: &mut Graph<S>,
    zb: NodeId,
    zn: NodeId,
    tau: S,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let inv_tau = S::one() / tau;
    let znt = g.transpose(zn)?;
    let sim = g.matmul(zb, znt)?;
    let logits = g.scale(sim, inv_tau);
    let shifted = g.add_scalar(logits, -inv_tau);
    let mut e = g.exp(shifted);
    if let Some(m) = mask {
        e = g.mul(e, m)?;
    }
    let den = g.sum(e, Some(1), false)?;
    let lse = g.log(den);
    let pos = g.mul(zb, zn)?;
    let pos = g.sum(pos, Some(1), false)?;
    let pos = g.scale(pos, inv_tau);
    let per = g.sub(lse, pos)?;
    let per = g.add_scalar(per, inv_tau);
    let loss = g.sum_all(per);
    Ok(g.label(loss, "nce.masked"))
}

/// `M_ik = 1` when samples `i` and `k` come from the same domain.
pub fn domain_mask<S: Scalar>(domains: &[u32]) -> Tensor<S> {
    let n = domains.len();
    let data = (0..n * n)
        .map(|ik| {
            if domains[ik / n] == domains[ik % n] {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();
    Tensor::new(&[n, n], data).expect("square mask")
}

/// Mean one-hot cross-entropy `-mean_i log softmax(logits_i)[y_i]` with the
/// labels supplied as a one-hot `[N, C]` node.
pub fn cross_entropy_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    one_hot: NodeId,
) -> Result<NodeId> {
    let n = g.shape(logits)[0];
    let p = g.softmax(logits, 1)?;
    let lp = g.log(p);
    let picked = g.mul(lp, one_hot)?;
    let total = g.sum_all(picked);
    let loss = g.scale(total, -S::one() / S::from_usize_lossy(n));
    Ok(g.label(loss, "cross_entropy"))
}

pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = S::one();
    }
    Ok(t)
}

/// `Σ_{m ∈ {b, n}}` mean cross-entropy of each modality's domain logits.
pub fn discriminator_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits_b: NodeId,
    logits_n: NodeId,
    one_hot: NodeId,
) -> Result<NodeId> {
    let lb = cross_entropy_graph(g, logits_b, one_hot)?;
    let ln = cross_entropy_graph(g, logits_n, one_hot)?;
    let loss = g.add(lb, ln)?;
    Ok(g.label(loss, "discriminator"))
}

pub fn mse_graph<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "mse",
            format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred),
                g.shape(target)
            ),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let loss = g.mean_all(sq);
    Ok(g.label(loss, "mse"))
}

/// Squared pairwise distances between the rows of `x: [N, D]`.
fn pairwise_sq_dist<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    let norms = g.sum(sq, Some(1), true)?;
    let norms_t = g.transpose(norms)?;
    let xt = g.transpose(x)?;
    let gram = g.matmul(x, xt)?;
    let gram2 = g.scale(gram, S::from_f64_lossy(-2.0));
    let d = g.add(norms, norms_t)?;
    g.add(d, gram2)
}

/// `Σ_ij W_ij k(x_i, x_j)` with `k` the average of Gaussian kernels whose
/// exponents are `coef[k] · ‖x_i − x_j‖²` (`coef = -1/(2σ_k²)`, shape `[K, 1, 1]`).
///
/// With `W = w wᵀ`, `w_i = 1/n` on one set and `-1/m` on the other, this is the
/// biased squared MMD between the two sets.
pub fn weighted_kernel_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    weights: NodeId,
    coef: NodeId,
) -> Result<NodeId> {
    let n = g.shape(x)[0];
    let d = pairwise_sq_dist(g, x)?;
    let d = g.reshape(d, &[1, n, n])?;
    let scaled = g.mul(d, coef)?;
    let k = g.exp(scaled);
    let k = g.mean(k, Some(0), false)?;
    let wk = g.mul(k, weights)?;
    let out = g.sum_all(wk);
    Ok(g.label(out, "mmd"))
}

/// `[B, B]` weights averaging the squared MMD over every pair of distinct
/// domains present in `domains`. Zero when fewer than two domains appear.
pub fn mmd_pair_weights<S: Scalar>(domains: &[u32]) -> Tensor<S> {
    let n = domains.len();
    let mut present: Vec<u32> = domains.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut w = vec![0.0f64; n * n];
    let pairs = present.len() * present.len().saturating_sub(1) / 2;
    for (a, &s) in present.iter().enumerate() {
        for &t in &present[a + 1..] {
            let ns = domains.iter().filter(|&&d| d == s).count() as f64;
            let nt = domains.iter().filter(|&&d| d == t).count() as f64;
            let v: Vec<f64> = domains
                .iter()
                .map(|&d| {
                    if d == s {
                        1.0 / ns
                    } else if d == t {
                        -1.0 / nt
                    } else {
                        0.0
                    }
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    w[i * n + j] += v[i] * v[j] / pairs as f64;
                }
            }
        }
    }
    Tensor::new(&[n, n], w.into_iter().map(S::from_f64_lossy).collect()).expect("square weights")
}

/// `-1/(2σ²)` for each `σ = multiplier · median pairwise distance` of `rows`.
pub fn median_bandwidth_coefs(rows: &Tensor, multipliers: &[f64]) -> Tensor {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let a = &rows.data()[i * d..(i + 1) * d];
            let b = &rows.data()[j * d..(j + 1) * d];
            dists.push(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = if dists.is_empty() {
        1.0
    } else if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    let median = if median > 0.0 { median } else { 1.0 };
    let coef: Vec<f64> = multipliers
        .iter()
        .map(|m| -1.0 / (2.0 * (m * median).powi(2)))
        .collect();
    Tensor::new(&[coef.len(), 1, 1], coef).expect("coefficient vector")
}

fn check_unit_rows<S: Scalar>(what: &str, z: &Tensor<S>) -> Result<()> {
    if z.rank() != 2 || z.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "{what} must be [N >= 1, D], got {:?}",
            z.shape()
        )));
    }
    let d = z.shape()[1];
    for (i, row) in z.data().chunks(d).enumerate() {
        let n = row
            .iter()
            .map(|&v| v * v)
            .fold(S::zero(), |a, b| a + b)
            .sqrt();
        if (n - S::one()).abs() > S::from_f64_lossy(1e-6) {
            return Err(Error::invalid(format!(
                "row {i} of {what} has norm {n}; embeddings must be unit-normalized"
            )));
        }
    }
    Ok(())
}

fn run_scalar<S: Scalar>(g: &Graph<S>, feeds: TensorMap<S>, out: NodeId) -> Result<S> {
    Ok(evaluate(g, &[&feeds], Mode::Eval)?.value(out).item())
}

fn pair_inputs<S: Scalar>(
    g: &mut Graph<S>,
    zb: &Tensor<S>,
    zn: &Tensor<S>,
) -> Result<(NodeId, NodeId)> {
    check_unit_rows("Zb", zb)?;
    check_unit_rows("Zn", zn)?;
    if zb.shape() != zn.shape() {
        return Err(Error::invalid(format!(
            "Zb {:?} vs Zn {:?}",
            zb.shape(),
            zn.shape()
        )));
    }
    Ok((g.input("zb", zb.shape())?, g.input("zn", zn.shape())?))
}

fn feeds<S: Scalar>(items: Vec<(&str, Tensor<S>)>) -> TensorMap<S> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Symmetric InfoNCE of paired unit embeddings.
pub fn info_nce_symmetric<S: Scalar>(zb: &Tensor<S>, zn: &Tensor<S>, tau: S) -> Result<S> {
    if !(tau > S::zero()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut g = Graph::new();
    let (b, n) = pair_inputs(&mut g, zb, zn)?;
    let loss = nce_graph(&mut g, b, n, tau, None, MaskSides::None)?;
    run_scalar(
        &g,
        feeds(vec![("zb", zb.clone()), ("zn", zn.clone())]),
        loss,
    )
}

/// Behavior-to-neural InfoNCE whose negatives come only from the anchor's domain.
pub fn domain_masked_nce<S: Scalar>(
    zb: &Tensor<S>,
    zn: &Tensor<S>,
    domains: &[u32],
    tau: S,
) -> Result<S> {
    if !(tau > S::zero()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if domains.len() != zb.shape().first().copied().unwrap_or(0) {
        return Err(Error::invalid("one domain label per row is required"));
    }
    let mut g = Graph::new();
    let (b, n) = pair_inputs(&mut g, zb, zn)?;
    let m = g.input("mask", &[domains.len(), domains.len()])?;
    let loss = nce_one_direction_graph(&mut g, b, n, tau, Some(m))?;
    let f = feeds(vec![
        ("zb", zb.clone()),
        ("zn", zn.clone()),
        ("mask", domain_mask(domains)),
    ]);
    run_scalar(&g, f, loss)
}

/// Biased multi-bandwidth squared MMD between `x: [n, d]` and `y: [m, d]`
/// for absolute kernel widths `bandwidths`.
pub fn mmd(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(Error::invalid(format!(
            "mmd needs [n, d] and [m, d], got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.shape()[0] == 0 || y.shape()[0] == 0 {
        return Err(Error::invalid("mmd needs non-empty sample sets"));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::invalid("bandwidths must be positive"));
    }
    let (n, m, d) = (x.shape()[0], y.shape()[0], x.shape()[1]);
    let mut rows = x.data().to_vec();
    rows.extend_from_slice(y.data());
    let domains: Vec<u32> = (0..n + m).map(|i| u32::from(i >= n)).collect();
    let coef: Vec<f64> = bandwidths.iter().map(|s| -1.0 / (2.0 * s * s)).collect();
    let mut g = Graph::new();
    let xi = g.input("x", &[n + m, d])?;
    let wi = g.input("w", &[n + m, n + m])?;
    let ci = g.input("coef", &[coef.len(), 1, 1])?;
    let out = weighted_kernel_graph(&mut g, xi, wi, ci)?;
    let f = feeds(vec![
        ("x", Tensor::new(&[n + m, d], rows)?),
        ("w", mmd_pair_weights(&domains)),
        ("coef", Tensor::new(&[coef.len(), 1, 1], coef)?),
    ]);
    run_scalar(&g, f, out)
}

/// Summed cross-entropy of both modalities' domain logits against `animals`.
pub fn discriminator_loss(logits_b: &Tensor, logits_n: &Tensor, animals: &[usize]) -> Result<f64> {
    if logits_b.shape() != logits_n.shape()
        || logits_b.rank() != 2
        || logits_b.shape()[0] != animals.len()
    {
        return Err(Error::invalid(
            "logits must both be [N, A] with one animal id per row",
        ));
    }
    let oh = one_hot(animals, logits_b.shape()[1])?;
    let mut g = Graph::new();
    let b = g.input("b", logits_b.shape())?;
    let n = g.input("n", logits_n.shape())?;
    let y = g.input("y", oh.shape())?;
    let out = discriminator_loss_graph(&mut g, b, n, y)?;
    run_scalar(
        &g,
        feeds(vec![
            ("b", logits_b.clone()),
            ("n", logits_n.clone()),
            ("y", oh),
        ]),
        out,
    )
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::invalid(
            "logits must be [N, C] with one label per row",
        ));
    }
    let oh = one_hot(labels, logits.shape()[1])?;
    let mut g = Graph::new();
    let l = g.input("l", logits.shape())?;
    let y = g.input("y", oh.shape())?;
    let out = cross_entropy_graph(&mut g, l, y)?;
    run_scalar(&g, feeds(vec![("l", logits.clone()), ("y", oh)]), out)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input("p", pred.shape())?;
    let t = g.input("t", target.shape())?;
    let out = mse_graph(&mut g, p, t)?;
    run_scalar(
        &g,
        feeds(vec![("p", pred.clone()), ("t", target.clone())]),
        out,
    )
}
