use serde::{Deserialize, Serialize};

use super::{dff, AnimalRecording, SyntheticDataset, BEHAVIOR_HZ, NEURAL_HZ};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub neural_len: usize,
    pub behavior_len: usize,
    /// Step between consecutive neural window starts, in neural frames.
    pub stride: usize,
    /// Moving-average length used for the ΔF/F baseline.
    pub dff_window: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            neural_len: 32,
            behavior_len: 8,
            stride: 8,
            dff_window: 15,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neural_len == 0
            || self.behavior_len == 0
            || self.stride == 0
            || self.dff_window == 0
        {
            return Err(Error::config(
                "windows",
                "lengths, stride and dff_window must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Location of one synchronized window inside a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub recording: usize,
    pub animal_id: u32,
    pub trial: u32,
    pub neural_start: usize,
    pub behavior_start: usize,
    pub center_timestamp: f64,
    pub behavior_center_timestamp: f64,
    pub label: Option<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedWindow {
    /// `[behavior_len, pose_dim]`
    pub behavior: Tensor,
    /// `[neural_len, extent, extent]`, ΔF/F.
    pub neural: Tensor,
    pub animal_id: u32,
    pub trial: u32,
    pub neural_start: usize,
    pub center_timestamp: f64,
    pub label: Option<u16>,
}

fn majority(labels: &[u16]) -> u16 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    // BTreeMap iterates in ascending label order, so ties keep the smallest.
    counts
        .into_iter()
        .fold(
            (0u16, 0usize),
            |(bl, bc), (l, c)| if c > bc { (l, c) } else { (bl, bc) },
        )
        .0
}

fn entries_for(recording: &AnimalRecording, index: usize, cfg: &WindowConfig) -> Vec<WindowEntry> {
    let tn = recording.neural_frames();
    let tb = recording.behavior_frames();
    let mut out = Vec::new();
    if tn < cfg.neural_len {
        return out;
    }
    let half_b = cfg.behavior_len / 2;
    let mut start = 0;
    while start + cfg.neural_len <= tn {
        let center = start + cfg.neural_len / 2;
        let center_t = center as f64 / NEURAL_HZ;
        let bc = (center_t * BEHAVIOR_HZ).round() as usize;
        if bc >= half_b && bc - half_b + cfg.behavior_len <= tb {
            let behavior_start = bc - half_b;
            let label = recording
                .labels
                .as_ref()
                .map(|l| majority(&l[behavior_start..behavior_start + cfg.behavior_len]));
            out.push(WindowEntry {
                recording: index,
                animal_id: recording.animal_id,
                trial: recording.trial,
                neural_start: start,
                behavior_start,
                center_timestamp: center_t,
                behavior_center_timestamp: bc as f64 / BEHAVIOR_HZ,
                label,
            });
        }
        start += cfg.stride;
    }
    out
}

/// Slide synchronized windows over one recording. Neural frames are ΔF/F
/// normalized over the whole recording first. Recordings shorter than one
/// neural window yield no windows.
pub fn make_windows(recording: &AnimalRecording, cfg: &WindowConfig) -> Result<Vec<PairedWindow>> {
    cfg.validate()?;
    let entries = entries_for(recording, 0, cfg);
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let neural = dff(&recording.fluorescence, cfg.dff_window)?;
    let set = WindowSet {
        config: cfg.clone(),
        neural: vec![neural],
        poses: vec![recording.poses.clone()],
        entries,
        frame_shape: recording.fluorescence.shape()[1..].to_vec(),
        pose_dim: recording.poses.shape()[1],
    };
    Ok((0..set.len()).map(|i| set.window(i)).collect())
}

/// All windows of a dataset, kept as offsets into per-recording ΔF/F and
/// pose arrays so training never copies whole windows up front.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub config: WindowConfig,
    pub neural: Vec<Tensor>,
    pub poses: Vec<Tensor>,
    pub entries: Vec<WindowEntry>,
    pub frame_shape: Vec<usize>,
    pub pose_dim: usize,
}

impl WindowSet {
    /// Windows of every recording accepted by `keep`.
    pub fn build(
        dataset: &SyntheticDataset,
        cfg: &WindowConfig,
        keep: impl Fn(&AnimalRecording) -> bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut neural = Vec::new();
        let mut poses = Vec::new();
        let mut entries = Vec::new();
        for rec in dataset.recordings.iter().filter(|r| keep(r)) {
            let e = entries_for(rec, neural.len(), cfg);
            if e.is_empty() {
                continue;
            }
            entries.extend(e);
            neural.push(dff(&rec.fluorescence, cfg.dff_window)?);
            poses.push(rec.poses.clone());
        }
        let extent = dataset.config.image_extent;
        Ok(Self {
            config: cfg.clone(),
            neural,
            poses,
            entries,
            frame_shape: vec![extent, extent],
            pose_dim: dataset.config.pose_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }

    pub fn behavior(&self, i: usize) -> &[f64] {
        let e = &self.entries[i];
        let d = self.pose_dim;
        &self.poses[e.recording].data()
            [e.behavior_start * d..(e.behavior_start + self.config.behavior_len) * d]
    }

    pub fn neural(&self, i: usize) -> &[f64] {
        let e = &self.entries[i];
        let f = self.frame_len();
        &self.neural[e.recording].data()
            [e.neural_start * f..(e.neural_start + self.config.neural_len) * f]
    }

    /// One ΔF/F frame of the recording that window `i` comes from.
    pub fn recording_frame(&self, recording: usize, frame: usize) -> &[f64] {
        let f = self.frame_len();
        &self.neural[recording].data()[frame * f..(frame + 1) * f]
    }

    pub fn recording_frames(&self, recording: usize) -> usize {
        self.neural[recording].shape()[0]
    }

    pub fn window(&self, i: usize) -> PairedWindow {
        let e = &self.entries[i];
        let mut nshape = vec![self.config.neural_len];
        nshape.extend(&self.frame_shape);
        PairedWindow {
            behavior: Tensor::new(
                &[self.config.behavior_len, self.pose_dim],
                self.behavior(i).to_vec(),
            )
            .expect("behavior slice has window shape"),
            neural: Tensor::new(&nshape, self.neural(i).to_vec())
                .expect("neural slice has window shape"),
            animal_id: e.animal_id,
            trial: e.trial,
            neural_start: e.neural_start,
            center_timestamp: e.center_timestamp,
            label: e.label,
        }
    }

    pub fn labels(&self) -> Option<Vec<u16>> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn animal_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.animal_id).collect()
    }

    /// Distinct animal ids in ascending order.
    pub fn animals(&self) -> Vec<u32> {
        let mut a = self.animal_ids();
        a.sort_unstable();
        a.dedup();
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_animal, SynthConfig};

    fn recording(seconds: f64) -> AnimalRecording {
        let cfg = SynthConfig {
            pose_dim: 6,
            image_extent: 8,
            n_units: 4,
            ..SynthConfig::default()
        };
        generate_animal(&cfg.animal(0), seconds, 1).unwrap()
    }

    fn truncate(rec: &AnimalRecording, neural_frames: usize) -> AnimalRecording {
        let e = rec.fluorescence.shape()[1];
        let tb = (neural_frames as f64 * BEHAVIOR_HZ / NEURAL_HZ) as usize;
        let d = rec.poses.shape()[1];
        AnimalRecording {
            poses: Tensor::new(&[tb, d], rec.poses.data()[..tb * d].to_vec()).unwrap(),
            spikes: rec.spikes.clone(),
            fluorescence: Tensor::new(
                &[neural_frames, e, e],
                rec.fluorescence.data()[..neural_frames * e * e].to_vec(),
            )
            .unwrap(),
            labels: rec.labels.as_ref().map(|l| l[..tb].to_vec()),
            ..rec.clone()
        }
    }

    #[test]
    fn exactly_one_window_at_minimum_length() {
        let rec = truncate(&recording(10.0), 32);
        assert_eq!(
            make_windows(&rec, &WindowConfig::default()).unwrap().len(),
            1
        );
        let short = truncate(&rec, 31);
        assert!(make_windows(&short, &WindowConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn counts_scale_with_duration() {
        let cfg = WindowConfig::default();
        let a = make_windows(&recording(20.0), &cfg).unwrap().len();
        let b = make_windows(&recording(40.0), &cfg).unwrap().len();
        // (T - 32) / 8 + 1 windows for T = 320 and 640 frames
        assert_eq!(a, 37);
        assert_eq!(b, 77);
    }

    #[test]
    fn centers_are_synchronized() {
        let rec = recording(30.0);
        let cfg = WindowConfig::default();
        let set = WindowSet {
            config: cfg.clone(),
            neural: vec![rec.fluorescence.clone()],
            poses: vec![rec.poses.clone()],
            entries: entries_for(&rec, 0, &cfg),
            frame_shape: vec![8, 8],
            pose_dim: 6,
        };
        for e in &set.entries {
            assert!((e.center_timestamp - e.behavior_center_timestamp).abs() <= 0.5 / NEURAL_HZ);
        }
    }

    #[test]
    fn majority_ties_pick_smallest() {
        assert_eq!(majority(&[3, 3, 1, 1, 2]), 1);
        assert_eq!(majority(&[5, 5, 5, 0]), 5);
    }

    #[test]
    fn window_contents_match_source() {
        let rec = recording(12.0);
        let cfg = WindowConfig::default();
        let w = make_windows(&rec, &cfg).unwrap();
        let n = dff(&rec.fluorescence, 15).unwrap();
        let second = &w[1];
        assert_eq!(second.neural_start, 8);
        assert_eq!(second.neural.data(), &n.data()[8 * 64..40 * 64]);
        // center frame 24 -> 1.5 s -> behavior frames 146..154
        assert_eq!(second.behavior.data(), &rec.poses.data()[146 * 6..154 * 6]);
    }
}
