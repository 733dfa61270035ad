//! Synthetic multi-animal behavioral/neural recordings.
//!
//! Each animal shares the same action vocabulary (pose templates and the
//! action-to-unit tuning are world-level), but differs in pose geometry and
//! in how its neurons appear on the imaging plane. Labels follow heavy-tailed
//! segment durations and a skewed class prior.

mod calcium;
mod persist;
mod render;
mod windows;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

pub use calcium::{calcium_transform, dff};
pub use persist::{load_dataset, save_dataset, MANIFEST_NAME, SCHEMA_VERSION};
pub use render::{render_neural_images, Layout};
pub use windows::{make_windows, PairedWindow, WindowConfig, WindowEntry, WindowSet};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const BEHAVIOR_HZ: f64 = 100.0;
pub const NEURAL_HZ: f64 = 16.0;
pub const MIN_DURATION_S: f64 = 10.0;

const BEHAVIOR_NAMES: [&str; 8] = [
    "forward_walking",
    "pushing",
    "hindleg_grooming",
    "abdominal_grooming",
    "rest",
    "foreleg_grooming",
    "antennal_grooming",
    "eye_grooming",
];

pub fn class_names(n_actions: usize) -> Vec<String> {
    (0..n_actions)
        .map(|k| {
            BEHAVIOR_NAMES
                .get(k)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("action_{k}"))
        })
        .collect()
}

/// Dataset-level generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Seeds everything animals share: pose templates, unit tuning, class prior.
    pub world_seed: u64,
    pub n_animals: usize,
    pub trials_per_animal: usize,
    pub trial_seconds: f64,
    pub pose_dim: usize,
    pub image_extent: usize,
    pub n_actions: usize,
    pub n_units: usize,
    pub gamma: f64,
    pub alpha: f64,
    /// Sensor noise standard deviation as a fraction of the image dynamic range.
    pub noise_fraction: f64,
    /// Firing probability per neural frame of an untuned / tuned unit.
    pub base_rate: f64,
    pub active_rate: f64,
    /// Scale (seconds) of the log-normal action segment durations.
    pub segment_scale_s: f64,
    /// Multiplier on every per-animal domain perturbation; 0 removes the gap.
    pub domain_spread: f64,
    pub labeled: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            n_animals: 8,
            trials_per_animal: 4,
            trial_seconds: 120.0,
            pose_dim: 60,
            image_extent: 32,
            n_actions: 6,
            n_units: 24,
            gamma: 0.957,
            alpha: 1.0,
            noise_fraction: 0.01,
            base_rate: 0.02,
            active_rate: 0.35,
            segment_scale_s: 1.5,
            domain_spread: 1.0,
            labeled: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("data.{field}"), reason))
            }
        };
        check(self.n_animals >= 1, "n_animals", "must be >= 1")?;
        check(
            self.trials_per_animal >= 1,
            "trials_per_animal",
            "must be >= 1",
        )?;
        check(
            self.trial_seconds >= MIN_DURATION_S,
            "trial_seconds",
            "must be >= 10",
        )?;
        check(self.pose_dim > 0, "pose_dim", "must be > 0")?;
        check(self.image_extent >= 8, "image_extent", "must be >= 8")?;
        check(self.n_actions >= 1, "n_actions", "must be >= 1")?;
        check(self.n_units >= 1, "n_units", "must be >= 1")?;
        check(
            (0.0..1.0).contains(&self.gamma),
            "gamma",
            "must lie in [0, 1)",
        )?;
        check(self.alpha > 0.0, "alpha", "must be > 0")?;
        check(self.noise_fraction >= 0.0, "noise_fraction", "must be >= 0")?;
        check(
            (0.0..=1.0).contains(&self.base_rate),
            "base_rate",
            "must be a probability",
        )?;
        check(
            (0.0..=1.0).contains(&self.active_rate),
            "active_rate",
            "must be a probability",
        )?;
        check(self.segment_scale_s > 0.0, "segment_scale_s", "must be > 0")?;
        check(self.domain_spread >= 0.0, "domain_spread", "must be >= 0")
    }

    pub fn animal(&self, animal_id: u32) -> AnimalConfig {
        let mut r = rng::stream(self.seed, "domain", animal_id as u64);
        let s = self.domain_spread;
        let pose_scale = (0..self.pose_dim)
            .map(|_| 1.0 + s * r.gen_range(-0.25..0.25))
            .collect();
        let pose_shift = (0..self.pose_dim)
            .map(|_| s * r.gen_range(-0.12..0.12))
            .collect();
        let brightness = 1.0 + s * r.gen_range(-0.5..0.5);
        let layout_seed = r.gen();
        AnimalConfig {
            animal_id,
            pose_dim: self.pose_dim,
            image_extent: self.image_extent,
            n_actions: self.n_actions,
            n_units: self.n_units,
            world_seed: self.world_seed,
            gamma: self.gamma,
            alpha: self.alpha,
            noise_fraction: self.noise_fraction,
            base_rate: self.base_rate,
            active_rate: self.active_rate,
            segment_scale_s: self.segment_scale_s,
            domain: DomainParams {
                pose_scale,
                pose_shift,
                layout_seed,
                brightness,
                spread: s,
            },
        }
    }
}

/// What makes one animal look different from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Per-coordinate affine map applied around 0.5: `0.5 + scale * (p - 0.5) + shift`.
    pub pose_scale: Vec<f64>,
    pub pose_shift: Vec<f64>,
    pub layout_seed: u64,
    pub brightness: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimalConfig {
    pub animal_id: u32,
    pub pose_dim: usize,
    pub image_extent: usize,
    pub n_actions: usize,
    pub n_units: usize,
    pub world_seed: u64,
    pub gamma: f64,
    pub alpha: f64,
    pub noise_fraction: f64,
    pub base_rate: f64,
    pub active_rate: f64,
    pub segment_scale_s: f64,
    pub domain: DomainParams,
}

impl AnimalConfig {
    pub fn layout(&self) -> Layout {
        Layout::generate(
            self.image_extent,
            self.n_units,
            self.world_seed,
            self.domain.layout_seed,
            self.domain.brightness,
            self.domain.spread,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.pose_dim == 0 || self.image_extent < 8 || self.n_actions == 0 || self.n_units == 0 {
            return Err(Error::invalid(
                "animal config needs pose_dim > 0, image_extent >= 8, n_actions >= 1, n_units >= 1",
            ));
        }
        if self.domain.pose_scale.len() != self.pose_dim
            || self.domain.pose_shift.len() != self.pose_dim
        {
            return Err(Error::invalid("domain pose affine does not match pose_dim"));
        }
        Ok(())
    }
}

/// One trial of one animal.
#[derive(Clone, Debug, PartialEq)]
pub struct AnimalRecording {
    pub animal_id: u32,
    pub trial: u32,
    /// `[T_behavior, pose_dim]`, values in `[0, 1]`, sampled at [`BEHAVIOR_HZ`].
    pub poses: Tensor,
    /// `[T_neural, units]` binary events at [`NEURAL_HZ`].
    pub spikes: Tensor,
    /// `[T_neural, extent, extent]`, strictly positive raw fluorescence.
    pub fluorescence: Tensor,
    /// Action id per behavioral frame.
    pub labels: Option<Vec<u16>>,
}

impl AnimalRecording {
    pub fn behavior_frames(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn neural_frames(&self) -> usize {
        self.fluorescence.shape()[0]
    }

    pub fn behavior_timestamp(&self, frame: usize) -> f64 {
        frame as f64 / BEHAVIOR_HZ
    }

    pub fn neural_timestamp(&self, frame: usize) -> f64 {
        frame as f64 / NEURAL_HZ
    }
}

struct PoseTemplate {
    base: Vec<f64>,
    amp: Vec<f64>,
    freq: f64,
    phase: Vec<f64>,
}

fn templates(world_seed: u64, n_actions: usize, pose_dim: usize) -> Vec<PoseTemplate> {
    (0..n_actions)
        .map(|a| {
            let mut r = rng::stream(world_seed, "pose-template", a as u64);
            PoseTemplate {
                base: (0..pose_dim).map(|_| r.gen_range(0.25..0.75)).collect(),
                amp: (0..pose_dim).map(|_| r.gen_range(0.03..0.15)).collect(),
                freq: r.gen_range(1.0..8.0),
                phase: (0..pose_dim)
                    .map(|_| r.gen_range(0.0..std::f64::consts::TAU))
                    .collect(),
            }
        })
        .collect()
}

/// Skewed class prior shared by every animal: weight of class k ∝ (k+1)^-0.8.
pub fn class_prior(n_actions: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n_actions)
        .map(|k| ((k + 1) as f64).powf(-0.8))
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Action label for every behavioral frame. Depends only on `seed` and the
/// action vocabulary, not on the animal's domain parameters.
fn label_sequence(config: &AnimalConfig, frames: usize, seed: u64) -> Result<Vec<u16>> {
    let mut r = rng::stream(seed, "labels", 0);
    let prior = class_prior(config.n_actions);
    let durations = LogNormal::new(0.0, 1.0).expect("valid log-normal");
    let mut labels = Vec::with_capacity(frames);
    let mut prev: Option<usize> = None;
    while labels.len() < frames {
        let action = if config.n_actions == 1 {
            0
        } else {
            let mut w = prior.clone();
            if let Some(p) = prev {
                w[p] = 0.0;
            }
            WeightedIndex::new(&w)
                .map_err(|e| Error::invalid(format!("class prior: {e}")))?
                .sample(&mut r)
        };
        let seconds = (config.segment_scale_s * durations.sample(&mut r)).max(0.2);
        let len = (seconds * BEHAVIOR_HZ).round() as usize;
        let take = len.min(frames - labels.len());
        labels.extend(std::iter::repeat(action as u16).take(take));
        prev = Some(action);
    }
    Ok(labels)
}

/// Generate one recording of `duration` seconds.
pub fn generate_animal(config: &AnimalConfig, duration: f64, seed: u64) -> Result<AnimalRecording> {
    config.validate()?;
    if !(duration >= MIN_DURATION_S) {
        return Err(Error::invalid(format!(
            "duration {duration} s is too short to fit one action segment (minimum {MIN_DURATION_S} s)"
        )));
    }
    let tb = (duration * BEHAVIOR_HZ).floor() as usize;
    let tn = (duration * NEURAL_HZ).floor() as usize;
    let labels = label_sequence(config, tb, seed)?;
    let d = config.pose_dim;

    let tpl = templates(config.world_seed, config.n_actions, d);
    let mut noise_rng = rng::stream(seed, "pose-noise", 0);
    let pose_noise = Normal::new(0.0, 0.01).expect("valid normal");
    let mut poses = Vec::with_capacity(tb * d);
    for (j, &a) in labels.iter().enumerate() {
        let t = j as f64 / BEHAVIOR_HZ;
        let p = &tpl[a as usize];
        for k in 0..d {
            let canonical = p.base[k]
                + p.amp[k] * (std::f64::consts::TAU * p.freq * t + p.phase[k]).sin()
                + pose_noise.sample(&mut noise_rng);
            let v =
                0.5 + config.domain.pose_scale[k] * (canonical - 0.5) + config.domain.pose_shift[k];
            poses.push(v.clamp(0.0, 1.0));
        }
    }

    let units = config.n_units;
    let mut spike_rng = rng::stream(seed, "spikes", 0);
    let mut spikes = Vec::with_capacity(tn * units);
    for i in 0..tn {
        let j = ((i as f64 * BEHAVIOR_HZ / NEURAL_HZ).round() as usize).min(tb - 1);
        let action = labels[j] as usize;
        for u in 0..units {
            let p = if u % config.n_actions == action {
                config.active_rate
            } else {
                config.base_rate
            };
            spikes.push(if spike_rng.gen_bool(p) { 1.0 } else { 0.0 });
        }
    }
    let spikes = Tensor::new(&[tn, units], spikes)?;
    let activity = calcium_transform(&spikes, config.gamma, config.alpha)?;
    let layout = config.layout();
    let mut fluorescence = render_neural_images(&activity, &layout)?;

    let (lo, hi) = fluorescence
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let sigma = config.noise_fraction * (hi - lo);
    let floor = 1e-3 * layout.brightness.max(1e-3);
    if sigma > 0.0 {
        let mut sensor = rng::stream(seed, "sensor-noise", 0);
        let n = Normal::new(0.0, sigma).expect("valid normal");
        for v in fluorescence.data_mut() {
            *v = (*v + n.sample(&mut sensor)).max(floor);
        }
    }

    Ok(AnimalRecording {
        animal_id: config.animal_id,
        trial: 0,
        poses: Tensor::new(&[tb, d], poses)?,
        spikes,
        fluorescence,
        labels: Some(labels),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub animals: Vec<AnimalConfig>,
    pub recordings: Vec<AnimalRecording>,
    pub class_names: Vec<String>,
}

impl SyntheticDataset {
    pub fn is_labeled(&self) -> bool {
        !self.recordings.is_empty() && self.recordings.iter().all(|r| r.labels.is_some())
    }

    pub fn animal_ids(&self) -> Vec<u32> {
        self.animals.iter().map(|a| a.animal_id).collect()
    }

    pub fn without_labels(mut self) -> Self {
        for r in &mut self.recordings {
            r.labels = None;
        }
        self.config.labeled = false;
        self
    }
}

pub fn recording_seed(seed: u64, animal_id: u32, trial: u32) -> u64 {
    rng::derive_seed(seed, "recording", ((animal_id as u64) << 32) | trial as u64)
}

/// Generate every trial of every animal.
pub fn generate_dataset(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let animals: Vec<AnimalConfig> = (0..config.n_animals as u32)
        .map(|a| config.animal(a))
        .collect();
    let mut recordings = Vec::with_capacity(config.n_animals * config.trials_per_animal);
    for a in &animals {
        for trial in 0..config.trials_per_animal as u32 {
            let mut rec = generate_animal(
                a,
                config.trial_seconds,
                recording_seed(config.seed, a.animal_id, trial),
            )?;
            rec.trial = trial;
            if !config.labeled {
                rec.labels = None;
            }
            recordings.push(rec);
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        animals,
        recordings,
        class_names: class_names(config.n_actions),
    })
}
