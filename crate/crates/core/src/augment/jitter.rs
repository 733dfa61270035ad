use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{BehaviorJitterConfig, NeuralJitterConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of every `[h, w]` frame in `frames`, with
/// replicated borders.
pub fn gaussian_blur(frames: &mut [f64], h: usize, w: usize, sigma: f64) {
    if !(sigma > 0.0) {
        return;
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for frame in frames.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += t * frame[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[yy * w + x];
                }
                frame[y * w + x] = acc;
            }
        }
    }
}

/// In-place neural jitter over `[T, h, w]` frames: intensity-dependent
/// noise, blur, contrast about each frame's mean, then brightness. Blur,
/// contrast and brightness are drawn once and shared by every frame.
pub(crate) fn neural_jitter_frames(
    frames: &mut [f64],
    h: usize,
    w: usize,
    cfg: &NeuralJitterConfig,
    rng: &mut impl Rng,
) {
    let sigma = draw(cfg.blur_sigma, rng);
    let contrast = draw(cfg.contrast, rng);
    let brightness = draw(cfg.brightness, rng);
    let scale = cfg.poisson_scale;
    if scale > 0.0 {
        for x in frames.iter_mut() {
            let v = x.max(0.0);
            if v == 0.0 {
                continue;
            }
            if cfg.exact_poisson {
                let counts: f64 = Poisson::new(v / scale).expect("positive rate").sample(rng);
                *x += scale * counts - v;
            } else {
                let z: f64 = StandardNormal.sample(rng);
                *x += (scale * v).sqrt() * z;
            }
        }
    }
    if sigma > 0.0 {
        gaussian_blur(frames, h, w, sigma);
    }
    if contrast != 1.0 {
        for frame in frames.chunks_mut(h * w) {
            let mean = frame.iter().sum::<f64>() / (h * w) as f64;
            for x in frame.iter_mut() {
                *x = mean + contrast * (*x - mean);
            }
        }
    }
    if brightness != 0.0 {
        for x in frames.iter_mut() {
            *x += brightness;
        }
    }
}

pub fn neural_jitter(
    window: &Tensor,
    cfg: &NeuralJitterConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if window.rank() != 3 {
        return Err(Error::invalid(format!(
            "neural window must be [T, H, W], got {:?}",
            window.shape()
        )));
    }
    let (h, w) = (window.shape()[1], window.shape()[2]);
    let mut out = window.clone();
    neural_jitter_frames(out.data_mut(), h, w, cfg, rng);
    Ok(out)
}

/// In-place behavioral jitter over `[T, dim]` frames. Coordinates are
/// grouped into consecutive triples (joints); a trailing partial group is
/// scaled and dropped like a joint but never sheared.
pub(crate) fn behavior_jitter_frames(
    frames: &mut [f64],
    dim: usize,
    cfg: &BehaviorJitterConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    if cfg.temporal_drop >= 1.0 && cfg.spatial_drop >= 1.0 {
        return Err(Error::invalid(
            "temporal and spatial drop probabilities are both 1; every value would be dropped",
        ));
    }
    let scale = draw(cfg.scale, rng);
    if scale != 1.0 {
        for x in frames.iter_mut() {
            *x *= scale;
        }
    }
    if cfg.shear > 0.0 {
        let s = cfg.shear;
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = rng.gen_range(-s..s);
                }
            }
        }
        for frame in frames.chunks_mut(dim) {
            for joint in frame.chunks_exact_mut(3) {
                let p = [joint[0], joint[1], joint[2]];
                for (i, row) in m.iter().enumerate() {
                    joint[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                }
            }
        }
    }
    if cfg.spatial_drop > 0.0 {
        let joints = dim.div_ceil(3);
        for j in 0..joints {
            if rng.gen_bool(cfg.spatial_drop) {
                let (a, b) = (3 * j, (3 * j + 3).min(dim));
                for frame in frames.chunks_mut(dim) {
                    frame[a..b].fill(0.0);
                }
            }
        }
    }
    if cfg.temporal_drop > 0.0 {
        for frame in frames.chunks_mut(dim) {
            if rng.gen_bool(cfg.temporal_drop) {
                frame.fill(0.0);
            }
        }
    }
    Ok(())
}

pub fn behavior_jitter(
    window: &Tensor,
    cfg: &BehaviorJitterConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if window.rank() != 2 {
        return Err(Error::invalid(format!(
            "behavior window must be [T, pose_dim], got {:?}",
            window.shape()
        )));
    }
    let mut out = window.clone();
    behavior_jitter_frames(out.data_mut(), window.shape()[1], cfg, rng)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    fn random_window(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "window", 0);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..30.0)).collect()).unwrap()
    }

    #[test]
    fn zero_strength_neural_is_identity() {
        let w = random_window(&[4, 5, 6], 1);
        let out = neural_jitter(
            &w,
            &NeuralJitterConfig::identity(),
            &mut rng::stream(0, "j", 0),
        )
        .unwrap();
        assert_eq!(bits(&out), bits(&w));
    }

    #[test]
    fn zero_strength_behavior_is_identity() {
        let w = random_window(&[8, 7], 2);
        let out = behavior_jitter(
            &w,
            &BehaviorJitterConfig::identity(),
            &mut rng::stream(0, "j", 0),
        )
        .unwrap();
        assert_eq!(bits(&out), bits(&w));
    }

    #[test]
    fn large_blur_keeps_constant_image() {
        let mut frames = vec![3.25; 2 * 9 * 7];
        gaussian_blur(&mut frames, 9, 7, 40.0);
        assert!(frames.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn brightness_shifts_mean_exactly() {
        let w = random_window(&[3, 4, 4], 3);
        let cfg = NeuralJitterConfig {
            brightness: [2.5, 2.5],
            ..NeuralJitterConfig::identity()
        };
        let out = neural_jitter(&w, &cfg, &mut rng::stream(0, "j", 0)).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean(&out) - mean(&w) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn contrast_preserves_frame_means() {
        let w = random_window(&[3, 4, 4], 4);
        let cfg = NeuralJitterConfig {
            contrast: [1.7, 1.7],
            ..NeuralJitterConfig::identity()
        };
        let out = neural_jitter(&w, &cfg, &mut rng::stream(0, "j", 0)).unwrap();
        for (a, b) in w.data().chunks(16).zip(out.data().chunks(16)) {
            assert!((a.iter().sum::<f64>() - b.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn poisson_noise_variance_tracks_intensity() {
        for exact in [false, true] {
            let cfg = NeuralJitterConfig {
                poisson_scale: 0.5,
                exact_poisson: exact,
                ..NeuralJitterConfig::identity()
            };
            let w = Tensor::full(&[50, 20, 20], 8.0);
            let out = neural_jitter(&w, &cfg, &mut rng::stream(1, "p", exact as u64)).unwrap();
            let n = out.len() as f64;
            let mean = out.data().iter().sum::<f64>() / n;
            let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!((mean - 8.0).abs() < 0.05, "mean {mean}");
            assert!((var - 4.0).abs() < 0.3, "var {var}");
        }
    }

    #[test]
    fn scale_two_doubles() {
        let w = random_window(&[8, 6], 5);
        let cfg = BehaviorJitterConfig {
            scale: [2.0, 2.0],
            ..BehaviorJitterConfig::identity()
        };
        let out = behavior_jitter(&w, &cfg, &mut rng::stream(0, "j", 0)).unwrap();
        for (a, b) in w.data().iter().zip(out.data()) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn both_drops_certain_is_error() {
        let cfg = BehaviorJitterConfig {
            temporal_drop: 1.0,
            spatial_drop: 1.0,
            ..BehaviorJitterConfig::identity()
        };
        assert!(
            behavior_jitter(&Tensor::ones(&[8, 3]), &cfg, &mut rng::stream(0, "j", 0)).is_err()
        );
    }

    #[test]
    fn spatial_drop_zeroes_whole_joints() {
        let cfg = BehaviorJitterConfig {
            spatial_drop: 0.5,
            ..BehaviorJitterConfig::identity()
        };
        let out =
            behavior_jitter(&Tensor::ones(&[8, 9]), &cfg, &mut rng::stream(2, "j", 0)).unwrap();
        for j in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|t| out.data()[t * 9 + 3 * j..t * 9 + 3 * j + 3].to_vec())
                .collect();
            assert!(vals.iter().all(|&v| v == 0.0) || vals.iter().all(|&v| v == 1.0));
        }
    }
}
