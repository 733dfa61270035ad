use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Where each latent unit shows up in one animal's field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub extent: usize,
    /// `(row, col)` blob centers in pixels.
    pub centers: Vec<(f64, f64)>,
    /// Gaussian blob standard deviation in pixels.
    pub widths: Vec<f64>,
    pub gains: Vec<f64>,
    /// Resting fluorescence added to every pixel.
    pub brightness: f64,
}

impl Layout {
    /// Units sit along two columns (left/right of the midline) at shared
    /// positions; each animal shifts, jitters and rescales them.
    pub fn generate(
        extent: usize,
        units: usize,
        world_seed: u64,
        layout_seed: u64,
        brightness: f64,
        spread: f64,
    ) -> Self {
        let e = extent as f64;
        let mut world = rng::stream(world_seed, "layout-base", 0);
        let mut own = rng::stream(layout_seed, "layout-animal", 0);
        let shift = (
            own.gen_range(-0.08..0.08) * e * spread,
            own.gen_range(-0.08..0.08) * e * spread,
        );
        let width = own.gen_range(0.035..0.06) * e;
        let mut centers = Vec::with_capacity(units);
        let mut widths = Vec::with_capacity(units);
        let mut gains = Vec::with_capacity(units);
        for u in 0..units {
            let side = if u % 2 == 0 { 0.35 } else { 0.65 };
            let row = 0.12 + 0.76 * (u / 2) as f64 / ((units + 1) / 2).max(1) as f64;
            let base = (
                row * e + world.gen_range(-0.03..0.03) * e,
                side * e + world.gen_range(-0.05..0.05) * e,
            );
            let jitter = (
                own.gen_range(-0.03..0.03) * e * spread,
                own.gen_range(-0.03..0.03) * e * spread,
            );
            let clamp = |v: f64| v.clamp(0.0, e - 1.0);
            centers.push((
                clamp(base.0 + shift.0 + jitter.0),
                clamp(base.1 + shift.1 + jitter.1),
            ));
            widths.push(width * own.gen_range(0.8..1.25));
            gains.push(1.0 + spread * own.gen_range(-0.4..0.4));
        }
        Self {
            extent,
            centers,
            widths,
            gains,
            brightness,
        }
    }
}

/// `image_t = brightness + sum_u activity_t(u) * gain_u * blob_u`.
///
/// `activity` is `[T, units]`; the result is `[T, extent, extent]`.
pub fn render_neural_images(activity: &Tensor, layout: &Layout) -> Result<Tensor> {
    if activity.rank() != 2 || activity.shape()[1] != layout.centers.len() {
        return Err(Error::invalid(format!(
            "activity {:?} does not match a layout with {} units",
            activity.shape(),
            layout.centers.len()
        )));
    }
    let e = layout.extent;
    let ef = e as f64;
    for (u, &(r, c)) in layout.centers.iter().enumerate() {
        if !(0.0..ef).contains(&r) || !(0.0..ef).contains(&c) {
            return Err(Error::invalid(format!(
                "blob center ({r}, {c}) of unit {u} lies outside the {e}x{e} image"
            )));
        }
    }
    let units = layout.centers.len();
    let blobs: Vec<Vec<f64>> = (0..units)
        .map(|u| {
            let (r0, c0) = layout.centers[u];
            let inv = 1.0 / (2.0 * layout.widths[u] * layout.widths[u]);
            (0..e * e)
                .map(|p| {
                    let (r, c) = ((p / e) as f64, (p % e) as f64);
                    layout.gains[u] * (-((r - r0).powi(2) + (c - c0).powi(2)) * inv).exp()
                })
                .collect()
        })
        .collect();
    let t_len = activity.shape()[0];
    let mut out = vec![layout.brightness; t_len * e * e];
    for t in 0..t_len {
        let frame = &mut out[t * e * e..(t + 1) * e * e];
        for (u, blob) in blobs.iter().enumerate() {
            let a = activity.data()[t * units + u];
            if a == 0.0 {
                continue;
            }
            for (px, &b) in frame.iter_mut().zip(blob) {
                *px += a * b;
            }
        }
    }
    Tensor::new(&[t_len, e, e], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(seed: u64) -> Layout {
        Layout::generate(16, 4, 0, seed, 1.0, 1.0)
    }

    #[test]
    fn zero_activity_gives_constant_offset() {
        let l = layout(1);
        let img = render_neural_images(&Tensor::zeros(&[3, 4]), &l).unwrap();
        assert!(img.data().iter().all(|&v| v == l.brightness));
    }

    #[test]
    fn single_unit_peaks_at_its_center() {
        let mut l = layout(2);
        l.centers[0] = (5.0, 9.0);
        let mut act = Tensor::zeros(&[1, 4]);
        act.data_mut()[0] = 1.0;
        let img = render_neural_images(&act, &l).unwrap();
        let (argmax, _) = img
            .data()
            .iter()
            .enumerate()
            .fold(
                (0, f64::MIN),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        assert_eq!((argmax / 16, argmax % 16), (5, 9));
    }

    #[test]
    fn different_layouts_give_different_images() {
        let act = Tensor::full(&[2, 4], 1.0);
        let a = render_neural_images(&act, &layout(1)).unwrap();
        let b = render_neural_images(&act, &layout(2)).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn center_outside_image_is_error() {
        let mut l = layout(3);
        l.centers[1] = (16.5, 2.0);
        assert!(render_neural_images(&Tensor::zeros(&[1, 4]), &l).is_err());
    }
}
