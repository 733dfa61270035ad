use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Z-score features with training-row statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 64,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "eval.probe",
                "need lr > 0 and momentum in [0, 1)",
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "eval.probe",
                "epochs and batch_size must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Fold index of every row: a seeded shuffle dealt round-robin into `k` folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(Error::invalid(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "kfold", 0));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Like [`kfold_split`] but deals each class separately (continuing the
/// round-robin across classes), so every fold sees every class with at least
/// `k` members.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || labels.len() < k {
        return Err(Error::invalid(format!(
            "cannot split {} rows into {k} folds",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng::stream(seed, "stratified_kfold", c as u64));
        for i in rows {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

/// `⌈fraction · n_c⌉` seeded rows of every class `c`, returned in ascending order.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng::stream(seed, "subsample", c as u64));
        let take = (rows.len() as f64 * fraction).ceil() as usize;
        keep.extend_from_slice(&rows[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// A fitted linear classifier `argmax(W ((x - μ) / σ) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let c = self.classes();
        out.copy_from_slice(&self.bias);
        let w = self.weights.data();
        for (j, &x) in row.iter().enumerate() {
            let v = (x - self.mean[j]) * self.scale[j];
            if v != 0.0 {
                for (o, &wv) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                    *o += v * wv;
                }
            }
        }
    }

    /// Predicted class per row; ties go to the smallest index.
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let d = x.shape()[1];
        let mut out = vec![0.0; self.classes()];
        x.data()
            .chunks(d)
            .map(|row| {
                self.logits(row, &mut out);
                let mut best = 0;
                for (k, &v) in out.iter().enumerate() {
                    if v > out[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let hits = self
            .predict(x)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Train a randomly initialized linear layer with mini-batch SGD on the
/// softmax cross-entropy. `n_classes` fixes the output width; every class
/// must occur in `labels`.
pub fn fit_linear_probe(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::invalid(
            "probe needs [N, D] features with one label per row",
        ));
    }
    if n_classes < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    for c in 0..n_classes {
        if !labels.contains(&c) {
            return Err(Error::invalid(format!(
                "class {c} is absent from the probe training rows"
            )));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let rows: Vec<&[f64]> = x.data().chunks(d).collect();
    let (mut mean, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n as f64;
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            *s = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }
    let c = n_classes;
    let mut r = rng::stream(seed, "probe", 0);
    let bound = 1.0 / (d as f64).sqrt();
    let mut probe = LinearProbe {
        weights: Tensor::new(
            &[d, c],
            (0..d * c).map(|_| r.gen_range(-bound..bound)).collect(),
        )?,
        bias: vec![0.0; c],
        mean,
        scale,
    };
    let mut vw = vec![0.0; d * c];
    let mut vb = vec![0.0; c];
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0; c];
    let mut xs = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, "probe_epoch", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                probe.logits(rows[i], &mut logits);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = (*l / z - f64::from(u8::from(k == labels[i]))) * inv;
                }
                for (j, xv) in xs.iter_mut().enumerate() {
                    *xv = (rows[i][j] - probe.mean[j]) * probe.scale[j];
                }
                for (j, &xv) in xs.iter().enumerate() {
                    if xv != 0.0 {
                        for (g, &e) in gw[j * c..(j + 1) * c].iter_mut().zip(&logits) {
                            *g += xv * e;
                        }
                    }
                }
                for (g, &e) in gb.iter_mut().zip(&logits) {
                    *g += e;
                }
            }
            for ((w, v), g) in probe.weights.data_mut().iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
            for ((b, v), g) in probe.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g;
                *b -= cfg.lr * *v;
            }
        }
    }
    Ok(probe)
}
