use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[γ^0, γ^1, …, γ^(length-1)]`.
pub fn calcium_kernel<S: Scalar>(gamma: S, length: usize) -> Result<Vec<S>> {
    if !(gamma >= S::zero() && gamma < S::one()) {
        return Err(Error::invalid(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    if length == 0 {
        return Err(Error::invalid("kernel length must be >= 1"));
    }
    let mut k = Vec::with_capacity(length);
    let mut v = S::one();
    for _ in 0..length {
        k.push(v);
        v = v * gamma;
    }
    Ok(k)
}

/// Where a neural window was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub animal_id: u32,
    pub trial: u32,
    pub start: usize,
    pub len: usize,
}

/// A single neural frame used as a past-activity impulse.
#[derive(Clone, Copy, Debug)]
pub struct Donor<'a, S = f64> {
    pub animal_id: u32,
    pub trial: u32,
    pub frame: usize,
    pub data: &'a [S],
}

/// Add `γ^(t-anchor) · donor` to every frame `t >= anchor` of `frames`
/// (`[T, frame_len]` row-major).
pub fn add_calcium_trace<S: Scalar>(frames: &mut [S], donor: &[S], gamma: S, anchor: usize) {
    let f = donor.len();
    let mut weight = S::one();
    for frame in frames.chunks_mut(f).skip(anchor) {
        for (x, &d) in frame.iter_mut().zip(donor) {
            *x += weight * d;
        }
        weight = weight * gamma;
    }
}

/// `window + K * donor_impulse`, the impulse placed at frame `anchor`.
///
/// The donor must come from the same animal and from outside the window.
pub fn calcium_augment<S: Scalar>(
    window: &Tensor<S>,
    span: WindowSpan,
    donor: &Donor<'_, S>,
    gamma: S,
    anchor: usize,
) -> Result<Tensor<S>> {
    if window.rank() < 2 || window.shape()[0] != span.len {
        return Err(Error::invalid(format!(
            "window {:?} does not have {} frames",
            window.shape(),
            span.len
        )));
    }
    let frame_len = window.len() / span.len;
    if donor.data.len() != frame_len {
        return Err(Error::invalid(format!(
            "donor frame has {} values, window frames have {frame_len}",
            donor.data.len()
        )));
    }
    if donor.animal_id != span.animal_id {
        return Err(Error::invalid(format!(
            "donor comes from animal {} but the window belongs to animal {}",
            donor.animal_id, span.animal_id
        )));
    }
    if donor.trial == span.trial && (span.start..span.start + span.len).contains(&donor.frame) {
        return Err(Error::invalid(format!(
            "donor frame {} lies inside the window [{}, {})",
            donor.frame,
            span.start,
            span.start + span.len
        )));
    }
    if anchor >= span.len {
        return Err(Error::invalid(format!(
            "anchor {anchor} outside the window"
        )));
    }
    // validates gamma
    calcium_kernel(gamma, 1)?;
    let mut out = window.clone();
    add_calcium_trace(out.data_mut(), donor.data, gamma, anchor);
    Ok(out)
}
