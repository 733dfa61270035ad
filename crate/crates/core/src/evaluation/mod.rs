//! Frozen-encoder evaluation: embedding export and linear-probe tasks.

mod probe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate, Mode};
use crate::encoders::ModelBuilder;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::{SyntheticDataset, WindowSet};
use crate::tensor::{Tensor, TensorMap};
use crate::training::{is_training_trial, Checkpoint};

pub use probe::{
    fit_linear_probe, kfold_split, stratified_kfold, stratified_subsample, LinearProbe, ProbeConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Single,
    Multi,
    Identity,
}

/// Which vector represents a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Encoder output `h_n`.
    PreProjection,
    /// Unit-norm projection `z_n`.
    PostProjection,
}

/// Which trials evaluation windows come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Heldout,
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub folds: usize,
    pub identity_samples: usize,
    /// Single-animal evaluation skips animals with fewer windows in any class.
    pub min_windows_per_class: usize,
    pub fraction: f64,
    pub seed: u64,
    pub representation: Representation,
    pub split: Split,
    /// Windows embedded per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            folds: 4,
            identity_samples: 1000,
            min_windows_per_class: 4,
            fraction: 1.0,
            seed: 0,
            representation: Representation::PreProjection,
            split: Split::All,
            chunk: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        if self.folds < 2 {
            return Err(Error::config("eval.folds", "must be >= 2"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("eval.fraction", "must lie in (0, 1]"));
        }
        if self.chunk == 0 || self.identity_samples == 0 {
            return Err(Error::config(
                "eval.chunk",
                "chunk and identity_samples must be >= 1",
            ));
        }
        Ok(())
    }
}

/// One vector per window plus the window's metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[N, D]`.
    pub values: Tensor,
    pub animal_ids: Vec<u32>,
    pub trials: Vec<u32>,
    pub labels: Vec<Option<u16>>,
    pub timestamps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub animal_id: u32,
    pub trial: u32,
    pub label: Option<u16>,
    pub timestamp: f64,
}

impl Embeddings {
    pub fn new(values: Tensor, set: &WindowSet) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != set.len() {
            return Err(Error::invalid(format!(
                "{:?} embeddings for {} windows",
                values.shape(),
                set.len()
            )));
        }
        Ok(Self {
            values,
            animal_ids: set.entries.iter().map(|e| e.animal_id).collect(),
            trials: set.entries.iter().map(|e| e.trial).collect(),
            labels: set.entries.iter().map(|e| e.label).collect(),
            timestamps: set.entries.iter().map(|e| e.center_timestamp).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.animal_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.animal_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn meta(&self) -> Vec<WindowMeta> {
        (0..self.len())
            .map(|i| WindowMeta {
                animal_id: self.animal_ids[i],
                trial: self.trials[i],
                label: self.labels[i],
                timestamp: self.timestamps[i],
            })
            .collect()
    }

    pub fn animals(&self) -> Vec<u32> {
        let mut a = self.animal_ids.clone();
        a.sort_unstable();
        a.dedup();
        a
    }

    fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.values.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(&[idx.len(), d], out).expect("row gather")
    }
}

/// Windows of `dataset` selected by `split`.
pub fn evaluation_windows<S: Scalar>(
    dataset: &SyntheticDataset,
    checkpoint: &Checkpoint<S>,
    split: Split,
) -> Result<WindowSet> {
    let trials = dataset.config.trials_per_animal;
    let holdout = checkpoint.header.setup.train.holdout_trials;
    WindowSet::build(dataset, &checkpoint.header.setup.windows, |r| match split {
        Split::All => true,
        Split::Training => is_training_trial(r, trials, holdout),
        Split::Heldout => !is_training_trial(r, trials, holdout),
    })
}

/// Eval-mode representations of every neural window in `set`.
pub fn embed<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    set: &WindowSet,
    representation: Representation,
    chunk: usize,
) -> Result<Embeddings> {
    let h = &checkpoint.header;
    let e = h.input.image_extent;
    if set.pose_dim != h.input.pose_dim
        || set.frame_shape != [e, e]
        || set.config != h.setup.windows
    {
        return Err(Error::config(
            "data",
            format!(
                "checkpoint expects pose_dim {} and {e}x{e} images with {:?}; data has pose_dim {} and {:?} with {:?}",
                h.input.pose_dim, h.setup.windows, set.pose_dim, set.frame_shape, set.config
            ),
        ));
    }
    if chunk == 0 {
        return Err(Error::invalid("chunk must be >= 1"));
    }
    let t = h.input.neural_len;
    let f = set.frame_len();
    let mut graphs = BTreeMap::new();
    let mut out: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut start = 0;
    while start < set.len() {
        let b = chunk.min(set.len() - start);
        if !graphs.contains_key(&b) {
            let mut mb = ModelBuilder::<S>::new(&h.setup.model, h.input)?;
            let x = mb.graph.input("neural", &[b, t, e, e])?;
            let h_n = mb.neural_encoder(x)?;
            let node = match representation {
                Representation::PreProjection => h_n,
                Representation::PostProjection => mb.projection_head("gn", h_n)?,
            };
            graphs.insert(b, (mb.graph, node));
        }
        let (graph, node) = &graphs[&b];
        let mut xs = Vec::with_capacity(b * t * f);
        for i in start..start + b {
            xs.extend(set.neural(i).iter().map(|&v| S::from_f64_lossy(v)));
        }
        let feeds: TensorMap<S> = [("neural".to_string(), Tensor::new(&[b, t, e, e], xs)?)]
            .into_iter()
            .collect();
        let ev = evaluate(
            graph,
            &[&feeds, &checkpoint.model.params, &checkpoint.model.running],
            Mode::Eval,
        )?;
        let v = ev.value(*node);
        dim = v.shape()[1];
        out.extend(v.data().iter().map(|x| x.lossy_f64()));
        start += b;
    }
    Embeddings::new(Tensor::new(&[set.len(), dim], out)?, set)
}

/// Time-averaged ΔF/F frame of every window, flattened: a linear baseline
/// that sees the raw neural input.
pub fn raw_neural_features(set: &WindowSet) -> Result<Embeddings> {
    let f = set.frame_len();
    let t = set.config.neural_len;
    let mut out = vec![0.0; set.len() * f];
    for i in 0..set.len() {
        for frame in set.neural(i).chunks(f) {
            for (o, v) in out[i * f..(i + 1) * f].iter_mut().zip(frame) {
                *o += v / t as f64;
            }
        }
    }
    Embeddings::new(Tensor::new(&[set.len(), f], out)?, set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub fraction: f64,
    /// Name of each fold (`animal 3 / fold 1`, `held-out animal 2`, `fold 0`).
    pub fold_names: Vec<String>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub chance: f64,
    pub n_samples: usize,
    pub skipped_animals: Vec<u32>,
}

impl EvalReport {
    fn new(
        task: Task,
        fraction: f64,
        folds: Vec<(String, f64)>,
        chance: f64,
        n: usize,
        skipped: Vec<u32>,
    ) -> Self {
        let mean = folds.iter().map(|f| f.1).sum::<f64>() / folds.len() as f64;
        let (fold_names, fold_accuracies) = folds.into_iter().unzip();
        Self {
            task,
            method: None,
            fraction,
            fold_names,
            fold_accuracies,
            mean_accuracy: mean,
            chance,
            n_samples: n,
            skipped_animals: skipped,
        }
    }
}

fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let mut a = train.to_vec();
    a.sort_unstable();
    if test.iter().any(|t| a.binary_search(t).is_ok()) {
        return Err(Error::invalid("probe training rows overlap the test rows"));
    }
    Ok(())
}

/// Fit on `train` rows (after class-stratified subsampling) and score on
/// `test`. Classes absent from the training rows count as misses.
fn probe_accuracy(
    x: &Embeddings,
    targets: &[usize],
    train: &[usize],
    test: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    check_disjoint(train, test)?;
    let y: Vec<usize> = train.iter().map(|&i| targets[i]).collect();
    let keep = stratified_subsample(&y, cfg.fraction, rng::derive_seed(seed, "fraction", 0))?;
    let train: Vec<usize> = keep.iter().map(|&k| train[k]).collect();
    let mut classes: Vec<usize> = train.iter().map(|&i| targets[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid(
            "probe training rows contain fewer than two classes",
        ));
    }
    let dense = |c: usize| classes.binary_search(&c).ok();
    let ytr: Vec<usize> = train
        .iter()
        .map(|&i| dense(targets[i]).expect("present"))
        .collect();
    let probe = fit_linear_probe(&x.rows(&train), &ytr, classes.len(), &cfg.probe, seed)?;
    let pred = probe.predict(&x.rows(test));
    let hits = pred
        .iter()
        .zip(test)
        .filter(|(&p, &i)| classes[p] == targets[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

fn labeled_rows(emb: &Embeddings) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rows: Vec<usize> = (0..emb.len())
        .filter(|&i| emb.labels[i].is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::MissingLabels(
            "action recognition needs labeled windows".into(),
        ));
    }
    let targets: Vec<usize> = emb
        .labels
        .iter()
        .map(|l| l.map_or(usize::MAX, usize::from))
        .collect();
    let mut classes: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    Ok((rows, targets, classes.len()))
}

/// k-fold probe within each animal; animals with a class shorter than
/// `min_windows_per_class` are skipped.
pub fn action_recognition_single(emb: &Embeddings, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (rows, targets, n_classes) = labeled_rows(emb)?;
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    let mut used = 0;
    for a in emb.animals() {
        let mine: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| emb.animal_ids[i] == a)
            .collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &mine {
            *counts.entry(targets[i]).or_default() += 1;
        }
        let min_needed = cfg.min_windows_per_class.max(cfg.folds);
        if counts.len() < 2 || counts.values().any(|&c| c < min_needed) {
            log::warn!("animal {a} skipped: not enough windows per class ({counts:?})");
            skipped.push(a);
            continue;
        }
        let y: Vec<usize> = mine.iter().map(|&i| targets[i]).collect();
        let fold = stratified_kfold(
            &y,
            cfg.folds,
            rng::derive_seed(cfg.seed, "single", a as u64),
        )?;
        for k in 0..cfg.folds {
            let train: Vec<usize> = (0..mine.len())
                .filter(|&j| fold[j] != k)
                .map(|j| mine[j])
                .collect();
            let test: Vec<usize> = (0..mine.len())
                .filter(|&j| fold[j] == k)
                .map(|j| mine[j])
                .collect();
            let seed = rng::derive_seed(cfg.seed, "single_probe", ((a as u64) << 16) | k as u64);
            folds.push((
                format!("animal {a} / fold {k}"),
                probe_accuracy(emb, &targets, &train, &test, cfg, seed)?,
            ));
        }
        used += mine.len();
    }
    if folds.is_empty() {
        return Err(Error::invalid(
            "no animal has enough labeled windows per class",
        ));
    }
    Ok(EvalReport::new(
        Task::Single,
        cfg.fraction,
        folds,
        1.0 / n_classes as f64,
        used,
        skipped,
    ))
}

/// Leave-one-animal-out probe.
pub fn action_recognition_multi(emb: &Embeddings, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (rows, targets, n_classes) = labeled_rows(emb)?;
    let animals: Vec<u32> = {
        let mut a: Vec<u32> = rows.iter().map(|&i| emb.animal_ids[i]).collect();
        a.sort_unstable();
        a.dedup();
        a
    };
    if animals.len() < 2 {
        return Err(Error::invalid(
            "multi-animal evaluation needs at least two labeled animals",
        ));
    }
    let mut folds = Vec::new();
    for &a in &animals {
        let (test, train): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| emb.animal_ids[i] == a);
        let seed = rng::derive_seed(cfg.seed, "multi_probe", a as u64);
        folds.push((
            format!("held-out animal {a}"),
            probe_accuracy(emb, &targets, &train, &test, cfg, seed)?,
        ));
    }
    Ok(EvalReport::new(
        Task::Multi,
        cfg.fraction,
        folds,
        1.0 / n_classes as f64,
        rows.len(),
        Vec::new(),
    ))
}

/// k-fold probe predicting the animal from a balanced draw of windows.
pub fn identity_recognition(emb: &Embeddings, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let animals = emb.animals();
    if animals.len() < 2 {
        return Err(Error::invalid(
            "identity recognition needs at least two animals",
        ));
    }
    let rows = if emb.len() <= cfg.identity_samples {
        if emb.len() < cfg.identity_samples {
            log::warn!(
                "only {} windows available; using all of them for identity recognition",
                emb.len()
            );
        }
        (0..emb.len()).collect::<Vec<_>>()
    } else {
        let a = animals.len();
        let mut pools: Vec<Vec<usize>> = animals
            .iter()
            .map(|&id| {
                (0..emb.len())
                    .filter(|&i| emb.animal_ids[i] == id)
                    .collect()
            })
            .collect();
        for (k, p) in pools.iter_mut().enumerate() {
            rand::seq::SliceRandom::shuffle(
                p.as_mut_slice(),
                &mut rng::stream(cfg.seed, "identity_draw", k as u64),
            );
        }
        // equal quotas, with shortfalls of small animals handed to the others
        let mut quota = vec![0usize; a];
        let mut left = cfg.identity_samples;
        while left > 0 {
            let open: Vec<usize> = (0..a).filter(|&k| quota[k] < pools[k].len()).collect();
            if open.is_empty() {
                break;
            }
            for &k in &open {
                if left == 0 {
                    break;
                }
                quota[k] += 1;
                left -= 1;
            }
        }
        let mut rows: Vec<usize> = pools
            .iter()
            .zip(&quota)
            .flat_map(|(p, &q)| p[..q].to_vec())
            .collect();
        rows.sort_unstable();
        rows
    };
    let targets: Vec<usize> = emb
        .animal_ids
        .iter()
        .map(|a| animals.binary_search(a).expect("known animal"))
        .collect();
    let y: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let fold = stratified_kfold(&y, cfg.folds, rng::derive_seed(cfg.seed, "identity", 0))?;
    let mut folds = Vec::new();
    for k in 0..cfg.folds {
        let train: Vec<usize> = (0..rows.len())
            .filter(|&j| fold[j] != k)
            .map(|j| rows[j])
            .collect();
        let test: Vec<usize> = (0..rows.len())
            .filter(|&j| fold[j] == k)
            .map(|j| rows[j])
            .collect();
        let seed = rng::derive_seed(cfg.seed, "identity_probe", k as u64);
        folds.push((
            format!("fold {k}"),
            probe_accuracy(emb, &targets, &train, &test, cfg, seed)?,
        ));
    }
    Ok(EvalReport::new(
        Task::Identity,
        cfg.fraction,
        folds,
        1.0 / animals.len() as f64,
        rows.len(),
        Vec::new(),
    ))
}

pub fn run_task(emb: &Embeddings, task: Task, cfg: &EvalConfig) -> Result<EvalReport> {
    match task {
        Task::Single => action_recognition_single(emb, cfg),
        Task::Multi => action_recognition_multi(emb, cfg),
        Task::Identity => identity_recognition(emb, cfg),
    }
}

#[cfg(test)]
mod tests;
