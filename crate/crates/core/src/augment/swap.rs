use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kdtree::{squared_distance, KdTree};
use super::SwapConfig;
use crate::error::{Error, Result};
use crate::synthgen::WindowSet;
use crate::tensor::Tensor;

/// How neighbor probabilities are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Softmax of negative distances over the N nearest poses only.
    TopN,
    /// Softmax over the whole target domain (every pose is a candidate).
    FullDomain,
}

struct Domain {
    poses: Vec<f64>,
    tree: Option<KdTree>,
}

impl Domain {
    fn len(&self, dim: usize) -> usize {
        match &self.tree {
            Some(t) => t.len(),
            None => self.poses.len() / dim,
        }
    }

    fn pose(&self, i: usize, dim: usize) -> &[f64] {
        match &self.tree {
            Some(t) => t.point(i),
            None => &self.poses[i * dim..(i + 1) * dim],
        }
    }
}

/// Per-animal single-frame pose sets with nearest-neighbor lookup.
pub struct SwapIndex {
    dim: usize,
    neighbors: usize,
    normalization: Normalization,
    animals: Vec<u32>,
    domains: Vec<Domain>,
}

/// Candidates for replacing one pose, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapCandidates {
    pub target: u32,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl SwapIndex {
    /// `poses[a]` holds every frame of animal `a`, row-major `[n, dim]`.
    pub fn build(poses: BTreeMap<u32, Vec<f64>>, dim: usize, cfg: &SwapConfig) -> Result<Self> {
        if dim == 0 || cfg.neighbors == 0 {
            return Err(Error::invalid(
                "swap index needs dim >= 1 and neighbors >= 1",
            ));
        }
        let mut animals = Vec::with_capacity(poses.len());
        let mut domains = Vec::with_capacity(poses.len());
        for (a, p) in poses {
            if p.len() % dim != 0 {
                return Err(Error::invalid(format!(
                    "poses of animal {a} are not [n, {dim}]"
                )));
            }
            let n = p.len() / dim;
            let domain = if n > cfg.kd_threshold {
                Domain {
                    poses: Vec::new(),
                    tree: Some(KdTree::build(p, dim)),
                }
            } else {
                Domain {
                    poses: p,
                    tree: None,
                }
            };
            animals.push(a);
            domains.push(domain);
        }
        Ok(Self {
            dim,
            neighbors: cfg.neighbors,
            normalization: cfg.normalization,
            animals,
            domains,
        })
    }

    /// Index every pose frame of every recording in `set`.
    pub fn from_windows(set: &WindowSet, cfg: &SwapConfig) -> Result<Self> {
        let mut by_recording = BTreeMap::new();
        for e in &set.entries {
            by_recording.insert(e.recording, e.animal_id);
        }
        let mut poses: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (&r, &a) in &by_recording {
            poses
                .entry(a)
                .or_default()
                .extend_from_slice(set.poses[r].data());
        }
        Self::build(poses, set.pose_dim, cfg)
    }

    pub fn animals(&self) -> &[u32] {
        &self.animals
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn domain(&self, animal: u32) -> Result<&Domain> {
        self.animals
            .binary_search(&animal)
            .map(|i| &self.domains[i])
            .map_err(|_| Error::invalid(format!("animal {animal} is not in the swap index")))
    }

    pub fn domain_size(&self, animal: u32) -> Result<usize> {
        Ok(self.domain(animal)?.len(self.dim))
    }

    pub fn pose(&self, animal: u32, index: usize) -> Result<&[f64]> {
        let d = self.domain(animal)?;
        if index >= d.len(self.dim) {
            return Err(Error::invalid(format!(
                "pose {index} out of range for animal {animal}"
            )));
        }
        Ok(d.pose(index, self.dim))
    }

    /// `k` nearest poses of `animal` as `(index, squared distance)`, ties by index.
    fn nearest(&self, domain: &Domain, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        if let Some(tree) = &domain.tree {
            return tree.nearest(query, k);
        }
        let n = domain.len(self.dim);
        let mut all: Vec<(usize, f64)> = (0..n)
            .map(|i| (i, squared_distance(domain.pose(i, self.dim), query)))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < n {
            all.select_nth_unstable_by(k, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        all
    }
}

/// Replacement candidates for `pose` in `target`'s domain with
/// `P(b) ∝ exp(-‖b - pose‖₂)`.
pub fn swap_distribution(pose: &[f64], target: u32, index: &SwapIndex) -> Result<SwapCandidates> {
    if pose.len() != index.dim {
        return Err(Error::invalid(format!(
            "pose has {} values, index expects {}",
            pose.len(),
            index.dim
        )));
    }
    let domain = index.domain(target)?;
    let n = domain.len(index.dim);
    if n == 0 {
        return Err(Error::invalid(format!(
            "domain of animal {target} is empty"
        )));
    }
    let k = match index.normalization {
        Normalization::TopN => index.neighbors.min(n),
        Normalization::FullDomain => n,
    };
    let near = index.nearest(domain, pose, k);
    let distances: Vec<f64> = near.iter().map(|&(_, d2)| d2.sqrt()).collect();
    let d0 = distances[0];
    let weights: Vec<f64> = distances.iter().map(|&d| (d0 - d).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(SwapCandidates {
        target,
        indices: near.iter().map(|&(i, _)| i).collect(),
        probabilities: weights.iter().map(|w| w / total).collect(),
        distances,
    })
}

fn sample_categorical(probabilities: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

/// Replace frames of `frames` (row-major `[T, dim]`) in place. Returns the
/// donor animal of every frame (`None` where untouched).
pub(crate) fn swap_frames(
    frames: &mut [f64],
    animal: u32,
    index: &SwapIndex,
    probability: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Option<u32>>> {
    let others: Vec<u32> = index
        .animals
        .iter()
        .copied()
        .filter(|&a| a != animal)
        .collect();
    if others.is_empty() {
        return Err(Error::invalid(
            "swap augmentation needs at least two animals (no foreign domain exists)",
        ));
    }
    let dim = index.dim;
    let mut sources = Vec::with_capacity(frames.len() / dim);
    for frame in frames.chunks_mut(dim) {
        if probability > 0.0 && rng.gen_bool(probability) {
            let target = others[rng.gen_range(0..others.len())];
            let c = swap_distribution(frame, target, index)?;
            let pick = c.indices[sample_categorical(&c.probabilities, rng)];
            frame.copy_from_slice(index.pose(target, pick)?);
            sources.push(Some(target));
        } else {
            sources.push(None);
        }
    }
    Ok(sources)
}

/// Independently replace each pose of `window` (`[T, pose_dim]`) with
/// probability `probability` by a neighbor from a uniformly drawn other animal.
pub fn swap_augment(
    window: &Tensor,
    animal: u32,
    index: &SwapIndex,
    probability: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if window.rank() != 2 || window.shape()[1] != index.dim {
        return Err(Error::invalid(format!(
            "window {:?} is not [T, {}]",
            window.shape(),
            index.dim
        )));
    }
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::invalid(format!(
            "probability {probability} outside [0, 1]"
        )));
    }
    let mut out = window.clone();
    swap_frames(out.data_mut(), animal, index, probability, rng)?;
    Ok(out)
}
