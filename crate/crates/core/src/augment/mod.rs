//! Stochastic transformations of behavioral and neural windows.

mod calcium;
pub(crate) mod jitter;
mod kdtree;
pub(crate) mod swap;

use serde::{Deserialize, Serialize};

pub use calcium::{add_calcium_trace, calcium_augment, calcium_kernel, Donor, WindowSpan};
pub use jitter::{behavior_jitter, gaussian_blur, neural_jitter};
pub use kdtree::KdTree;
pub use swap::{swap_augment, swap_distribution, Normalization, SwapCandidates, SwapIndex};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralJitterConfig {
    /// Noise variance per unit of intensity; 0 disables the noise step.
    pub poisson_scale: f64,
    /// Sample true Poisson counts instead of the Gaussian approximation.
    pub exact_poisson: bool,
    /// Blur standard deviation range in pixels.
    pub blur_sigma: [f64; 2],
    /// Additive brightness range (ΔF/F units).
    pub brightness: [f64; 2],
    /// Multiplicative contrast range about each frame's mean.
    pub contrast: [f64; 2],
}

impl Default for NeuralJitterConfig {
    fn default() -> Self {
        Self {
            poisson_scale: 0.5,
            exact_poisson: false,
            blur_sigma: [0.0, 1.0],
            brightness: [-5.0, 5.0],
            contrast: [0.8, 1.2],
        }
    }
}

impl NeuralJitterConfig {
    pub fn identity() -> Self {
        Self {
            poisson_scale: 0.0,
            exact_poisson: false,
            blur_sigma: [0.0, 0.0],
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorJitterConfig {
    /// Multiplicative scale range.
    pub scale: [f64; 2],
    /// Off-diagonal shear entries are drawn from `[-shear, shear]`.
    pub shear: f64,
    pub temporal_drop: f64,
    pub spatial_drop: f64,
}

impl Default for BehaviorJitterConfig {
    fn default() -> Self {
        Self {
            scale: [0.9, 1.1],
            shear: 0.1,
            temporal_drop: 0.1,
            spatial_drop: 0.1,
        }
    }
}

impl BehaviorJitterConfig {
    pub fn identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            shear: 0.0,
            temporal_drop: 0.0,
            spatial_drop: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapConfig {
    /// Per-frame replacement probability.
    pub probability: f64,
    pub neighbors: usize,
    pub normalization: Normalization,
    /// Domains larger than this use the k-d tree instead of a linear scan.
    pub kd_threshold: usize,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            neighbors: 128,
            normalization: Normalization::TopN,
            kd_threshold: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalciumAugConfig {
    pub gamma: f64,
    /// Probability of injecting a donor trace into a window.
    pub probability: f64,
    /// Anchor the trace at a uniformly drawn frame instead of frame 0.
    pub random_anchor: bool,
}

impl Default for CalciumAugConfig {
    fn default() -> Self {
        Self {
            gamma: 0.957,
            probability: 0.5,
            random_anchor: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub neural: NeuralJitterConfig,
    pub behavior: BehaviorJitterConfig,
    pub swap: SwapConfig,
    pub calcium: CalciumAugConfig,
}

fn probability(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("probability {p} outside [0, 1]"),
        ))
    }
}

fn ordered(field: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("range [{}, {}] is not well-ordered", r[0], r[1]),
        ))
    }
}

impl AugmentConfig {
    /// Every transformation with zero strength.
    pub fn identity() -> Self {
        Self {
            neural: NeuralJitterConfig::identity(),
            behavior: BehaviorJitterConfig::identity(),
            swap: SwapConfig {
                probability: 0.0,
                ..SwapConfig::default()
            },
            calcium: CalciumAugConfig {
                probability: 0.0,
                ..CalciumAugConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.neural;
        if !(n.poisson_scale >= 0.0) {
            return Err(Error::config(
                "augment.neural.poisson_scale",
                "must be >= 0",
            ));
        }
        ordered("augment.neural.blur_sigma", n.blur_sigma)?;
        if n.blur_sigma[0] < 0.0 {
            return Err(Error::config("augment.neural.blur_sigma", "must be >= 0"));
        }
        ordered("augment.neural.brightness", n.brightness)?;
        ordered("augment.neural.contrast", n.contrast)?;
        let b = &self.behavior;
        ordered("augment.behavior.scale", b.scale)?;
        if !(b.shear >= 0.0) {
            return Err(Error::config("augment.behavior.shear", "must be >= 0"));
        }
        probability("augment.behavior.temporal_drop", b.temporal_drop)?;
        probability("augment.behavior.spatial_drop", b.spatial_drop)?;
        if b.temporal_drop >= 1.0 && b.spatial_drop >= 1.0 {
            return Err(Error::config(
                "augment.behavior",
                "temporal_drop and spatial_drop cannot both be 1",
            ));
        }
        probability("augment.swap.probability", self.swap.probability)?;
        if self.swap.neighbors == 0 {
            return Err(Error::config("augment.swap.neighbors", "must be >= 1"));
        }
        probability("augment.calcium.probability", self.calcium.probability)?;
        if !(0.0..1.0).contains(&self.calcium.gamma) {
            return Err(Error::config("augment.calcium.gamma", "must lie in [0, 1)"));
        }
        Ok(())
    }
}
