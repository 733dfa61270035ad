//! Calcium indicator dynamics and fluorescence normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First-order autoregressive calcium model applied per unit:
/// `n_t = gamma * n_{t-1} + alpha * s_t`, with `n_{-1} = 0`.
///
/// `spikes` is `[T, units]`; the output has the same shape.
pub fn calcium_transform<S: Scalar>(spikes: &Tensor<S>, gamma: S, alpha: S) -> Result<Tensor<S>> {
    if !(gamma >= S::zero() && gamma < S::one()) {
        return Err(Error::invalid(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    if !(alpha > S::zero()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if spikes.rank() != 2 {
        return Err(Error::invalid(format!(
            "spikes must be [T, units], got {:?}",
            spikes.shape()
        )));
    }
    let (t_len, units) = (spikes.shape()[0], spikes.shape()[1]);
    let s = spikes.data();
    let mut out = vec![S::zero(); s.len()];
    for u in 0..units {
        let mut level = S::zero();
        for t in 0..t_len {
            level = gamma * level + alpha * s[t * units + u];
            out[t * units + u] = level;
        }
    }
    Tensor::new(spikes.shape(), out)
}

/// ΔF/F in percent: `(F - F0) / F0 * 100`, where `F0` is the per-pixel
/// minimum over time of a trailing moving average of `window` frames
/// (the first frames average over what is available).
///
/// `frames` is `[T, ...pixels]`.
pub fn dff<S: Scalar>(frames: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    if window == 0 {
        return Err(Error::invalid("moving-average window must be >= 1"));
    }
    if frames.rank() < 1 || frames.shape()[0] == 0 {
        return Err(Error::invalid("dff needs at least one frame"));
    }
    let t_len = frames.shape()[0];
    let px = frames.len() / t_len;
    let f = frames.data();
    let mut baseline = vec![S::infinity(); px];
    // deviations from the first frame, so a constant pixel averages to itself exactly
    let reference = &f[..px];
    let mut running = vec![S::zero(); px];
    for t in 0..t_len {
        for p in 0..px {
            running[p] += f[t * px + p] - reference[p];
            if t >= window {
                running[p] -= f[(t - window) * px + p] - reference[p];
            }
        }
        let count = S::from_usize_lossy((t + 1).min(window));
        for p in 0..px {
            let avg = reference[p] + running[p] / count;
            if avg < baseline[p] {
                baseline[p] = avg;
            }
        }
    }
    if let Some(p) = baseline.iter().position(|&b| !(b > S::zero())) {
        return Err(Error::invalid(format!(
            "non-positive baseline fluorescence at pixel {p}"
        )));
    }
    let hundred = S::from_f64_lossy(100.0);
    let out = f
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = baseline[i % px];
            (v - b) / b * hundred
        })
        .collect();
    Tensor::new(frames.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_f64(&[v.len(), 1], v).unwrap()
    }

    #[test]
    fn zero_gamma_is_scaled_spikes() {
        let s = col(&[1.0, 0.0, 1.0, 1.0]);
        let n = calcium_transform(&s, 0.0, 2.5).unwrap();
        assert_eq!(n.data(), &[2.5, 0.0, 2.5, 2.5]);
    }

    #[test]
    fn impulse_decays_geometrically() {
        let n = calcium_transform(&col(&[1.0, 0.0, 0.0, 0.0]), 0.5, 1.0).unwrap();
        assert_eq!(n.data(), &[1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn gamma_out_of_range_is_error() {
        assert!(calcium_transform(&col(&[1.0]), 1.0, 1.0).is_err());
        assert!(calcium_transform(&col(&[1.0]), -0.1, 1.0).is_err());
        assert!(calcium_transform(&col(&[1.0]), 0.5, 0.0).is_err());
    }

    #[test]
    fn matches_direct_recursion_on_random_binary_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t_len, units) = (2000, 3);
        let spikes: Vec<f64> = (0..t_len * units)
            .map(|_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 })
            .collect();
        let s = Tensor::new(&[t_len, units], spikes.clone()).unwrap();
        let out = calcium_transform(&s, 0.9, 1.3).unwrap();
        for u in 0..units {
            let mut prev = 0.0;
            for t in 0..t_len {
                let want = 0.9 * prev + 1.3 * spikes[t * units + u];
                assert_eq!(out.data()[t * units + u], want);
                prev = want;
            }
        }
    }

    #[test]
    fn dff_of_constant_is_zero() {
        for c in [7.5, 0.1, 1.0 / 3.0, 123.456] {
            let f = Tensor::<f64>::full(&[40, 2, 2], c);
            assert!(dff(&f, 15).unwrap().data().iter().all(|&v| v == 0.0), "{c}");
        }
    }

    #[test]
    fn dff_hand_evaluated_example() {
        // trailing averages with window 2: 10, 10, 10, 15 -> F0 = 10
        let out = dff(&col(&[10.0, 10.0, 10.0, 20.0]), 2).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 100.0]);
    }

    #[test]
    fn dff_rejects_nonpositive_baseline() {
        assert!(dff(&col(&[0.0, 1.0, 2.0]), 2).is_err());
    }

    proptest! {
        #[test]
        fn calcium_transform_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s1: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s2: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let t = |v: Vec<f64>| calcium_transform(&Tensor::new(&[30, 2], v).unwrap(), 0.8, 1.0).unwrap();
            let (n1, n2, nm) = (t(s1), t(s2), t(mix));
            for i in 0..60 {
                let want = a * n1.data()[i] + b * n2.data()[i];
                prop_assert!((nm.data()[i] - want).abs() < 1e-9);
            }
        }

        #[test]
        fn dff_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..40).map(|_| rng.gen_range(1.0..5.0)).collect();
            let base = dff(&Tensor::new(&[20, 2], v.clone()).unwrap(), 4).unwrap();
            let scaled = dff(&Tensor::new(&[20, 2], v.iter().map(|x| x * c).collect()).unwrap(), 4).unwrap();
            for (x, y) in base.data().iter().zip(scaled.data()) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
