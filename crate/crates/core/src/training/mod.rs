//! Optimizers, the learning-rate schedule and the training loop shared by
//! every method, plus checkpointing.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::jitter::{behavior_jitter_frames, neural_jitter_frames};
use crate::augment::swap::swap_frames;
use crate::augment::{add_calcium_trace, AugmentConfig, SwapIndex};
use crate::autodiff::{backward, evaluate, Graph, Mode, NodeId};
use crate::encoders::{init_params, Head, InputShape, ModelBuilder, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::objectives::{
    cross_entropy_graph, discriminator_loss_graph, domain_mask, median_bandwidth_coefs,
    mmd_pair_weights, mse_graph, nce_graph, one_hot, weighted_kernel_graph, LossConfig, MaskSides,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::{AnimalRecording, SyntheticDataset, WindowConfig, WindowSet, BEHAVIOR_HZ};
use crate::tensor::{Tensor, TensorMap};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorRecord,
    CHECKPOINT_VERSION,
};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Contrastive pairing with the swapping and calcium augmentations.
    Ours,
    /// Contrastive pairing with generic augmentations only.
    Simclr,
    /// Decode the behavior window from the neural window.
    Regression,
    /// Neural encoder plus classifier trained on action labels.
    Supervised,
}

impl Method {
    pub fn is_contrastive(self) -> bool {
        matches!(self, Method::Ours | Method::Simclr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapt {
    None,
    /// Domain discriminators behind a gradient reversal layer.
    Grl,
    /// Kernel mean discrepancy between animals.
    Mmd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub adapt: Adapt,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub swap: bool,
    pub calcium_aug: bool,
    pub seed: u64,
    /// Trials per animal kept out of training (the last ones by index).
    pub holdout_trials: usize,
    pub adam: AdamConfig,
    /// Write the wall-clock duration of each epoch into the metrics log
    /// (zero otherwise, which makes the log byte-reproducible).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            adapt: Adapt::None,
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 3,
            swap: true,
            calcium_aug: true,
            seed: 0,
            holdout_trials: 2,
            adam: AdamConfig::default(),
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.epochs < self.warmup_epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                "must not exceed train.epochs",
            ));
        }
        if self.batch_size == 0 || (self.method.is_contrastive() && self.batch_size < 2) {
            return Err(Error::config(
                "train.batch_size",
                "contrastive methods need at least 2",
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "train.lr",
                "need lr > 0 and weight_decay >= 0",
            ));
        }
        if self.adapt != Adapt::None && !self.method.is_contrastive() {
            return Err(Error::config(
                "train.adapt",
                "domain adaptation applies to contrastive methods only",
            ));
        }
        Ok(())
    }

    /// Whether the swapping augmentation actually runs.
    pub fn uses_swap(&self) -> bool {
        self.method == Method::Ours && self.swap
    }

    pub fn uses_calcium_aug(&self) -> bool {
        self.method == Method::Ours && self.calcium_aug
    }
}

/// Linear warm-up followed by a half-cosine decay to zero.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let base = cfg.lr;
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(base * (epoch + 1) as f64 / w as f64);
    }
    let span = (cfg.epochs - w).max(1) as f64;
    let progress = (epoch - w) as f64 / span;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub windows: WindowConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.windows.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Whether a recording belongs to the training split.
pub fn is_training_trial(rec: &AnimalRecording, trials_per_animal: usize, holdout: usize) -> bool {
    (rec.trial as usize) + holdout < trials_per_animal
}

/// Training windows of `dataset` after holding out the last trials of each animal.
pub fn training_windows(dataset: &SyntheticDataset, setup: &TrainSetup) -> Result<WindowSet> {
    let trials = dataset.config.trials_per_animal;
    if setup.train.holdout_trials >= trials {
        return Err(Error::config(
            "train.holdout_trials",
            format!(
                "holding out {} of {trials} trials leaves nothing to train on",
                setup.train.holdout_trials
            ),
        ));
    }
    WindowSet::build(dataset, &setup.windows, |r| {
        is_training_trial(r, trials, setup.train.holdout_trials)
    })
}

pub fn input_shape(dataset: &SyntheticDataset, windows: &WindowConfig) -> InputShape {
    InputShape {
        pose_dim: dataset.config.pose_dim,
        image_extent: dataset.config.image_extent,
        neural_len: windows.neural_len,
        behavior_len: windows.behavior_len,
    }
}

/// Heads a method trains on top of the encoders.
pub fn heads_for(train: &TrainConfig, n_classes: usize, n_animals: usize) -> Vec<Head> {
    let mut heads = Vec::new();
    match train.method {
        Method::Supervised => heads.push(Head::Classifier { classes: n_classes }),
        Method::Regression => heads.push(Head::Regression),
        _ => {}
    }
    if train.adapt == Adapt::Grl {
        heads.push(Head::Discriminators { animals: n_animals });
    }
    heads
}

/// Node handles of the batch training graph.
struct TrainGraph<S> {
    graph: Graph<S>,
    loss: NodeId,
    h_n: NodeId,
    h_b: Option<NodeId>,
}

fn build_graph<S: Scalar>(
    setup: &TrainSetup,
    shape: InputShape,
    heads: &[Head],
    batch: usize,
) -> Result<TrainGraph<S>> {
    let mut mb = ModelBuilder::<S>::new(&setup.model, shape)?;
    let e = shape.image_extent;
    let xn = mb.graph.input("neural", &[batch, shape.neural_len, e, e])?;
    let xb = mb
        .graph
        .input("behavior", &[batch, shape.behavior_len, shape.pose_dim])?;
    let h_n = mb.neural_encoder(xn)?;
    let tau = S::from_f64_lossy(setup.loss.temperature);
    let train = &setup.train;
    let (loss, h_b) = match train.method {
        Method::Ours | Method::Simclr => {
            let h_b = mb.behavior_encoder(xb)?;
            let zn = mb.projection_head("gn", h_n)?;
            let zb = mb.projection_head("gb", h_b)?;
            let g = &mut mb.graph;
            let loss = if train.adapt == Adapt::None {
                nce_graph(g, zb, zn, tau, None, MaskSides::None)?
            } else {
                let mask = g.input("mask", &[batch, batch])?;
                let sides = if setup.loss.mask_both_directions {
                    MaskSides::Both
                } else {
                    MaskSides::BehaviorToNeural
                };
                nce_graph(g, zb, zn, tau, Some(mask), sides)?
            };
            let extra = match train.adapt {
                Adapt::None => None,
                Adapt::Grl => {
                    let Some(Head::Discriminators { animals }) = heads
                        .iter()
                        .find(|h| matches!(h, Head::Discriminators { .. }))
                        .copied()
                    else {
                        return Err(Error::invalid(
                            "gradient reversal needs discriminator heads",
                        ));
                    };
                    let rn = mb.graph.grad_reverse(h_n, S::one())?;
                    let rb = mb.graph.grad_reverse(h_b, S::one())?;
                    let ln = mb.discriminator("disc_n", rn, animals)?;
                    let lb = mb.discriminator("disc_b", rb, animals)?;
                    let g = &mut mb.graph;
                    let y = g.input("domain_onehot", &[batch, animals])?;
                    let d = discriminator_loss_graph(g, lb, ln, y)?;
                    Some(g.scale(d, S::from_f64_lossy(setup.loss.lambda_d)))
                }
                Adapt::Mmd => {
                    let g = &mut mb.graph;
                    let w = g.input("mmd_weights", &[batch, batch])?;
                    let k = setup.loss.mmd_bandwidths.len();
                    let cn = g.input("mmd_coef_n", &[k, 1, 1])?;
                    let cb = g.input("mmd_coef_b", &[k, 1, 1])?;
                    let mn = weighted_kernel_graph(g, h_n, w, cn)?;
                    let mb_ = weighted_kernel_graph(g, h_b, w, cb)?;
                    let m = g.add(mn, mb_)?;
                    Some(g.scale(m, S::from_f64_lossy(setup.loss.lambda_mmd)))
                }
            };
            let g = &mut mb.graph;
            let loss = match extra {
                Some(x) => {
                    let gate = g.input("adapt_gate", &[])?;
                    let gated = g.mul(x, gate)?;
                    g.add(loss, gated)?
                }
                None => loss,
            };
            (loss, Some(h_b))
        }
        Method::Regression => {
            let decoded = mb.regression_decoder(h_n)?;
            (mse_graph(&mut mb.graph, decoded, xb)?, None)
        }
        Method::Supervised => {
            let Some(Head::Classifier { classes }) = heads.first().copied() else {
                return Err(Error::invalid(
                    "supervised training needs a classifier head",
                ));
            };
            let logits = mb.classifier("cls", h_n, classes)?;
            let g = &mut mb.graph;
            let y = g.input("labels_onehot", &[batch, classes])?;
            (cross_entropy_graph(g, logits, y)?, None)
        }
    };
    let loss = mb.graph.label(loss, "loss");
    Ok(TrainGraph {
        graph: mb.graph,
        loss,
        h_n,
        h_b,
    })
}

/// Mutable state of a run: parameters, optimizer moments and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S = f64> {
    pub model: ModelParams<S>,
    pub optimizer: AdamState<S>,
    pub epochs_completed: usize,
}

/// Drives epochs over a fixed training window set.
pub struct Trainer<'a, S = f64> {
    setup: TrainSetup,
    data: &'a WindowSet,
    shape: InputShape,
    heads: Vec<Head>,
    animals: Vec<u32>,
    n_classes: usize,
    swap: Option<SwapIndex>,
    recordings_by_animal: BTreeMap<u32, Vec<usize>>,
    tg: TrainGraph<S>,
    trainable: Vec<String>,
    state: TrainState<S>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    /// Fresh run with parameters initialized from the training seed.
    pub fn new(
        setup: TrainSetup,
        data: &'a WindowSet,
        shape: InputShape,
        n_classes: usize,
    ) -> Result<Self> {
        let animals = data.animals();
        let heads = heads_for(&setup.train, n_classes, animals.len());
        let model = init_params::<S>(
            &setup.model,
            shape,
            &heads,
            rng::derive_seed(setup.train.seed, "init", 0),
        )?;
        let state = TrainState {
            model,
            optimizer: AdamState::default(),
            epochs_completed: 0,
        };
        Self::with_state(setup, data, shape, n_classes, state)
    }

    /// Continue a run from a checkpoint.
    pub fn resume(checkpoint: Checkpoint<S>, data: &'a WindowSet) -> Result<Self> {
        let h = checkpoint.header;
        if data.animals() != h.animals {
            return Err(Error::config(
                "data",
                format!(
                    "checkpoint was trained on animals {:?}, data has {:?}",
                    h.animals,
                    data.animals()
                ),
            ));
        }
        let state = TrainState {
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            epochs_completed: h.epochs_completed,
        };
        Self::with_state(h.setup, data, h.input, h.n_classes, state)
    }

    fn with_state(
        setup: TrainSetup,
        data: &'a WindowSet,
        shape: InputShape,
        n_classes: usize,
        state: TrainState<S>,
    ) -> Result<Self> {
        setup.validate()?;
        let train = &setup.train;
        if data.config != setup.windows {
            return Err(Error::config(
                "windows",
                "window set was built with a different window config",
            ));
        }
        if data.len() < train.batch_size {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "{} windows cannot fill one batch of {}",
                    data.len(),
                    train.batch_size
                ),
            ));
        }
        let animals = data.animals();
        if train.uses_swap() && animals.len() < 2 {
            return Err(Error::config(
                "train.swap",
                "swapping needs at least two animals; disable it for single-animal data",
            ));
        }
        if train.method == Method::Supervised && data.labels().is_none() {
            return Err(Error::MissingLabels(
                "supervised training needs action labels on every window".into(),
            ));
        }
        if train.adapt != Adapt::None && animals.len() < 2 {
            return Err(Error::config(
                "train.adapt",
                "domain adaptation needs at least two animals",
            ));
        }
        let heads = heads_for(train, n_classes, animals.len());
        let swap = if train.uses_swap() {
            Some(SwapIndex::from_windows(data, &setup.augment.swap)?)
        } else {
            None
        };
        let mut recordings_by_animal: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for e in &data.entries {
            let list = recordings_by_animal.entry(e.animal_id).or_default();
            if list.last() != Some(&e.recording) {
                list.push(e.recording);
            }
        }
        let tg = build_graph::<S>(&setup, shape, &heads, train.batch_size)?;
        let trainable = tg.graph.param_names();
        for name in &trainable {
            if !state.model.params.contains_key(name) {
                return Err(Error::config(
                    "model",
                    format!("parameter `{name}` missing from the model state"),
                ));
            }
        }
        Ok(Self {
            setup,
            data,
            shape,
            heads,
            animals,
            n_classes,
            swap,
            recordings_by_animal,
            tg,
            trainable,
            state,
        })
    }

    pub fn state(&self) -> &TrainState<S> {
        &self.state
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_completed >= self.setup.train.epochs
    }

    /// Augmented behavior and neural frames of window `w` for `epoch`.
    fn sample(&self, epoch: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.setup.augment;
        let train = &self.setup.train;
        let mut r = rng::stream(train.seed, "augment", ((epoch as u64) << 32) | w as u64);
        let entry = &self.data.entries[w];
        let mut behavior = self.data.behavior(w).to_vec();
        let mut neural = self.data.neural(w).to_vec();
        if self.setup.train.method.is_contrastive() {
            behavior_jitter_frames(&mut behavior, self.data.pose_dim, &cfg.behavior, &mut r)?;
            if let Some(index) = &self.swap {
                swap_frames(
                    &mut behavior,
                    entry.animal_id,
                    index,
                    cfg.swap.probability,
                    &mut r,
                )?;
            }
        }
        let (h, wd) = (self.data.frame_shape[0], self.data.frame_shape[1]);
        neural_jitter_frames(&mut neural, h, wd, &cfg.neural, &mut r);
        if train.uses_calcium_aug()
            && cfg.calcium.probability > 0.0
            && r.gen_bool(cfg.calcium.probability)
        {
            let t = self.setup.windows.neural_len;
            if let Some((rec, frame)) = self.draw_donor(w, &mut r) {
                let anchor = if cfg.calcium.random_anchor {
                    r.gen_range(0..t)
                } else {
                    0
                };
                let donor = self.data.recording_frame(rec, frame);
                add_calcium_trace(&mut neural, donor, cfg.calcium.gamma, anchor);
            }
        }
        Ok((behavior, neural))
    }

    /// A frame of the same animal lying outside window `w`.
    fn draw_donor(&self, w: usize, r: &mut impl Rng) -> Option<(usize, usize)> {
        let e = &self.data.entries[w];
        let recs = &self.recordings_by_animal[&e.animal_id];
        let span = e.neural_start..e.neural_start + self.setup.windows.neural_len;
        for _ in 0..64 {
            let rec = recs[r.gen_range(0..recs.len())];
            let frame = r.gen_range(0..self.data.recording_frames(rec));
            if rec != e.recording || !span.contains(&frame) {
                return Some((rec, frame));
            }
        }
        None
    }

    fn batch_feeds(&self, epoch: usize, batch: &[usize]) -> Result<TensorMap<S>> {
        let (b, tb, d) = (
            batch.len(),
            self.setup.windows.behavior_len,
            self.data.pose_dim,
        );
        let (tn, f) = (self.setup.windows.neural_len, self.data.frame_len());
        let mut xb = Vec::with_capacity(b * tb * d);
        let mut xn = Vec::with_capacity(b * tn * f);
        for &w in batch {
            let (bw, nw) = self.sample(epoch, w)?;
            xb.extend(bw.into_iter().map(S::from_f64_lossy));
            xn.extend(nw.into_iter().map(S::from_f64_lossy));
        }
        let e = self.shape.image_extent;
        let mut feeds = TensorMap::new();
        feeds.insert("behavior".into(), Tensor::new(&[b, tb, d], xb)?);
        feeds.insert("neural".into(), Tensor::new(&[b, tn, e, e], xn)?);
        let domains: Vec<u32> = batch
            .iter()
            .map(|&w| self.data.entries[w].animal_id)
            .collect();
        let train = &self.setup.train;
        if train.adapt != Adapt::None {
            let active = epoch >= self.setup.loss.warm_start_epochs;
            feeds.insert("mask".into(), domain_mask(&domains));
            feeds.insert(
                "adapt_gate".into(),
                Tensor::scalar(if active { S::one() } else { S::zero() }),
            );
        }
        match train.adapt {
            Adapt::Grl => {
                let idx: Vec<usize> = domains
                    .iter()
                    .map(|a| {
                        self.animals
                            .binary_search(a)
                            .expect("batch animal is known")
                    })
                    .collect();
                feeds.insert("domain_onehot".into(), one_hot(&idx, self.animals.len())?);
            }
            Adapt::Mmd => {
                feeds.insert("mmd_weights".into(), mmd_pair_weights(&domains));
            }
            Adapt::None => {}
        }
        if train.method == Method::Supervised {
            let labels: Vec<usize> = batch
                .iter()
                .map(|&w| self.data.entries[w].label.map(usize::from))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::MissingLabels("a training window has no label".into()))?;
            feeds.insert("labels_onehot".into(), one_hot(&labels, self.n_classes)?);
        }
        Ok(feeds)
    }

    /// Both modalities of every batch row come from the same moment.
    fn check_pairing(&self, batch: &[usize]) -> Result<()> {
        let tolerance = 0.5 / BEHAVIOR_HZ + 1e-9;
        for &w in batch {
            let e = &self.data.entries[w];
            if (e.center_timestamp - e.behavior_center_timestamp).abs() > tolerance {
                return Err(Error::invalid(format!(
                    "window {w} pairs neural time {} with behavior time {}",
                    e.center_timestamp, e.behavior_center_timestamp
                )));
            }
        }
        Ok(())
    }

    /// Fill the bandwidth inputs from the representations of this batch.
    fn set_mmd_bandwidths(&self, feeds: &mut TensorMap<S>, params: &[&TensorMap<S>]) -> Result<()> {
        let k = self.setup.loss.mmd_bandwidths.len();
        feeds.insert("mmd_coef_n".into(), Tensor::full(&[k, 1, 1], -S::one()));
        feeds.insert("mmd_coef_b".into(), Tensor::full(&[k, 1, 1], -S::one()));
        let mut all: Vec<&TensorMap<S>> = vec![&*feeds];
        all.extend_from_slice(params);
        let probe = evaluate(&self.tg.graph, &all, Mode::Train)?;
        let coef = |id: NodeId| -> Tensor<S> {
            median_bandwidth_coefs(
                &probe.value(id).cast::<f64>(),
                &self.setup.loss.mmd_bandwidths,
            )
            .cast()
        };
        let cn = coef(self.tg.h_n);
        let cb = coef(self.tg.h_b.expect("contrastive graph has h_b"));
        feeds.insert("mmd_coef_n".into(), cn);
        feeds.insert("mmd_coef_b".into(), cb);
        Ok(())
    }

    /// Run one epoch and return its metrics record.
    pub fn run_epoch(&mut self) -> Result<MetricRecord> {
        if self.is_finished() {
            return Err(Error::invalid("all configured epochs have already run"));
        }
        let start = Instant::now();
        let epoch = self.state.epochs_completed;
        let train = self.setup.train.clone();
        let lr = cosine_lr(epoch, &train)?;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::stream(train.seed, "shuffle", epoch as u64));
        let warm = train.adapt != Adapt::None && epoch < self.setup.loss.warm_start_epochs;
        let momentum = S::from_f64_lossy(self.setup.model.bn_momentum);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks_exact(train.batch_size) {
            if train.method.is_contrastive() {
                self.check_pairing(batch)?;
            }
            let mut feeds = self.batch_feeds(epoch, batch)?;
            let params = [&self.state.model.params, &self.state.model.running];
            if train.adapt == Adapt::Mmd {
                self.set_mmd_bandwidths(&mut feeds, &params)?;
            }
            let ev = evaluate(&self.tg.graph, &[&feeds, params[0], params[1]], Mode::Train)?;
            let loss = ev.value(self.tg.loss).item().lossy_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    node: "loss".into(),
                });
            }
            let grads = backward(&self.tg.graph, &ev, self.tg.loss)?;
            let grads: TensorMap<S> = self
                .trainable
                .iter()
                .filter(|n| !(warm && n.starts_with("disc_")))
                .filter_map(|n| grads.get(n).map(|g| (n.clone(), g.clone())))
                .collect();
            let specs = &self.state.model.specs;
            adam_step(
                &mut self.state.model.params,
                &grads,
                &mut self.state.optimizer,
                &train.adam,
                lr,
                train.weight_decay,
                |n| specs.get(n).is_some_and(|s| s.decay),
            )?;
            for u in ev.bn_updates() {
                for (key, batch_stat) in [(&u.running_mean, &u.mean), (&u.running_var, &u.var)] {
                    let run = self
                        .state
                        .model
                        .running
                        .get_mut(key)
                        .ok_or_else(|| Error::Unbound(key.clone()))?;
                    for (r, &b) in run.data_mut().iter_mut().zip(batch_stat) {
                        *r = momentum * *r + (S::one() - momentum) * b;
                    }
                }
            }
            total += loss;
            batches += 1;
        }
        self.state.epochs_completed += 1;
        let wall_ms = if train.log_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(MetricRecord {
            epoch,
            step: self.state.optimizer.step,
            loss: total / batches as f64,
            lr,
            wall_ms,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint::new(
            &self.setup,
            self.shape,
            &self.heads,
            &self.animals,
            self.n_classes,
            &self.state,
        )
    }
}

/// Run every remaining epoch, appending one JSON line per epoch to `log`.
pub fn run_to_end<S: Scalar>(
    trainer: &mut Trainer<'_, S>,
    log: &mut impl Write,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    while !trainer.is_finished() {
        let rec = trainer.run_epoch()?;
        log::info!("epoch {} loss {:.6} lr {:.3e}", rec.epoch, rec.loss, rec.lr);
        let line = serde_json::to_string(&rec).map_err(|e| Error::Json {
            context: "metrics record".into(),
            source: e,
        })?;
        writeln!(log, "{line}").map_err(|e| Error::io("metrics log", e))?;
        records.push(rec);
    }
    Ok(records)
}

/// Train from scratch on `dataset` and write `checkpoint.bin` and
/// `metrics.ndjson` into `out_dir`.
pub fn train<S: Scalar>(
    setup: &TrainSetup,
    dataset: &SyntheticDataset,
    out_dir: &Path,
) -> Result<Vec<MetricRecord>> {
    setup.validate()?;
    let data = training_windows(dataset, setup)?;
    let shape = input_shape(dataset, &setup.windows);
    let mut trainer = Trainer::<S>::new(setup.clone(), &data, shape, dataset.class_names.len())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_NAME);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let records = run_to_end(&mut trainer, &mut log)?;
    save_checkpoint(&trainer.checkpoint(), &out_dir.join(CHECKPOINT_NAME))?;
    Ok(records)
}

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const METRICS_NAME: &str = "metrics.ndjson";
