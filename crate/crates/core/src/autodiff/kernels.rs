//! Forward and adjoint kernels for the heavier primitives.

use crate::scalar::Scalar;

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col_1d<S: Scalar>(
    x: &[S],
    ci: usize,
    l: usize,
    k: usize,
    pad: usize,
    lo: usize,
    col: &mut [S],
) {
    for c in 0..ci {
        let row_in = &x[c * l..(c + 1) * l];
        for kk in 0..k {
            let dst = &mut col[(c * k + kk) * lo..(c * k + kk + 1) * lo];
            for (t, d) in dst.iter_mut().enumerate() {
                let src = t + kk;
                *d = if src >= pad && src - pad < l {
                    row_in[src - pad]
                } else {
                    S::zero()
                };
            }
        }
    }
}

fn col2im_1d<S: Scalar>(
    col: &[S],
    ci: usize,
    l: usize,
    k: usize,
    pad: usize,
    lo: usize,
    dx: &mut [S],
) {
    for c in 0..ci {
        let row = &mut dx[c * l..(c + 1) * l];
        for kk in 0..k {
            let src = &col[(c * k + kk) * lo..(c * k + kk + 1) * lo];
            for (t, &v) in src.iter().enumerate() {
                let pos = t + kk;
                if pos >= pad && pos - pad < l {
                    row[pos - pad] += v;
                }
            }
        }
    }
}

pub struct Conv1dDims {
    pub b: usize,
    pub ci: usize,
    pub l: usize,
    pub co: usize,
    pub k: usize,
    pub pad: usize,
    pub lo: usize,
}

pub fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], d: &Conv1dDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.b * d.co * d.lo];
    let mut col = vec![S::zero(); d.ci * d.k * d.lo];
    for b in 0..d.b {
        im2col_1d(
            &x[b * d.ci * d.l..(b + 1) * d.ci * d.l],
            d.ci,
            d.l,
            d.k,
            d.pad,
            d.lo,
            &mut col,
        );
        let ob = &mut out[b * d.co * d.lo..(b + 1) * d.co * d.lo];
        S::gemm(
            d.co,
            d.ci * d.k,
            d.lo,
            S::one(),
            w,
            false,
            &col,
            false,
            S::zero(),
            ob,
        );
    }
    out
}

/// Returns `(dx, dw)`.
pub fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    d: &Conv1dDims,
) -> (Vec<S>, Vec<S>) {
    let ck = d.ci * d.k;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut col = vec![S::zero(); ck * d.lo];
    let mut dcol = vec![S::zero(); ck * d.lo];
    for b in 0..d.b {
        let xb = &x[b * d.ci * d.l..(b + 1) * d.ci * d.l];
        let gb = &dout[b * d.co * d.lo..(b + 1) * d.co * d.lo];
        im2col_1d(xb, d.ci, d.l, d.k, d.pad, d.lo, &mut col);
        S::gemm(
            d.co,
            d.lo,
            ck,
            S::one(),
            gb,
            false,
            &col,
            true,
            S::one(),
            &mut dw,
        );
        S::gemm(
            ck,
            d.co,
            d.lo,
            S::one(),
            w,
            true,
            gb,
            false,
            S::zero(),
            &mut dcol,
        );
        col2im_1d(
            &dcol,
            d.ci,
            d.l,
            d.k,
            d.pad,
            d.lo,
            &mut dx[b * d.ci * d.l..(b + 1) * d.ci * d.l],
        );
    }
    (dx, dw)
}

pub struct Conv2dDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dDims {
    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<S: Scalar>(&self, x: &[S], col: &mut [S]) {
        let cols = self.col_cols();
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy as usize >= self.h {
                            drow.fill(S::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < self.w {
                                srow[ix as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, col: &[S], dx: &mut [S]) {
        let cols = self.col_cols();
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                drow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], d: &Conv2dDims) -> Vec<S> {
    let in_sz = d.ci * d.h * d.w;
    let out_sz = d.co * d.ho * d.wo;
    let mut out = vec![S::zero(); d.n * out_sz];
    let mut col = vec![S::zero(); d.col_rows() * d.col_cols()];
    for n in 0..d.n {
        d.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut col);
        S::gemm(
            d.co,
            d.col_rows(),
            d.col_cols(),
            S::one(),
            w,
            false,
            &col,
            false,
            S::zero(),
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    out
}

pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    d: &Conv2dDims,
) -> (Vec<S>, Vec<S>) {
    let in_sz = d.ci * d.h * d.w;
    let out_sz = d.co * d.ho * d.wo;
    let (rows, cols) = (d.col_rows(), d.col_cols());
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut col = vec![S::zero(); rows * cols];
    let mut dcol = vec![S::zero(); rows * cols];
    for n in 0..d.n {
        let gn = &dout[n * out_sz..(n + 1) * out_sz];
        d.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut col);
        S::gemm(
            d.co,
            cols,
            rows,
            S::one(),
            gn,
            false,
            &col,
            true,
            S::one(),
            &mut dw,
        );
        S::gemm(
            rows,
            d.co,
            cols,
            S::one(),
            w,
            true,
            gn,
            false,
            S::zero(),
            &mut dcol,
        );
        d.col2im(&dcol, &mut dx[n * in_sz..(n + 1) * in_sz]);
    }
    (dx, dw)
}

/// Max-pool over the last axis of `[planes, l]`. Ties keep the lowest index.
/// Returns values and the flat source offset of each maximum.
pub fn max_pool1d<S: Scalar>(
    x: &[S],
    planes: usize,
    l: usize,
    size: usize,
) -> (Vec<S>, Vec<usize>) {
    let lo = l / size;
    let mut out = Vec::with_capacity(planes * lo);
    let mut arg = Vec::with_capacity(planes * lo);
    for p in 0..planes {
        for t in 0..lo {
            let base = p * l + t * size;
            let mut best = base;
            for j in base + 1..base + size {
                if x[j] > x[best] {
                    best = j;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

pub fn max_pool2d<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<S>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let j = base + (oy * size + dy) * w + ox * size + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn softmax<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| x[at(j)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

pub fn softmax_backward<S: Scalar>(y: &[S], g: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: S = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

/// Sum over `axis` (or everything when `None`).
pub fn reduce_sum<S: Scalar>(x: &[S], shape: &[usize], axis: Option<usize>) -> Vec<S> {
    match axis {
        None => vec![x.iter().copied().sum()],
        Some(a) => {
            let (outer, len, inner) = split_axis(shape, a);
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            out
        }
    }
}

/// Broadcast a reduced gradient back over `axis`.
pub fn expand_sum<S: Scalar>(g: &[S], shape: &[usize], axis: Option<usize>, scale: S) -> Vec<S> {
    let n: usize = shape.iter().product();
    match axis {
        None => vec![g[0] * scale; n],
        Some(a) => {
            let (outer, len, inner) = split_axis(shape, a);
            let mut out = vec![S::zero(); n];
            for o in 0..outer {
                for j in 0..len {
                    let dst = &mut out[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s * scale;
                    }
                }
            }
            out
        }
    }
}

pub fn l2_normalize<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> (Vec<S>, Vec<S>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    let mut norms = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let norm = (0..len).map(|j| x[at(j)] * x[at(j)]).sum::<S>().sqrt();
            norms[o * inner + i] = norm;
            for j in 0..len {
                out[at(j)] = x[at(j)] / norm;
            }
        }
    }
    (out, norms)
}

pub fn l2_normalize_backward<S: Scalar>(
    y: &[S],
    norms: &[S],
    g: &[S],
    shape: &[usize],
    axis: usize,
) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: S = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            let n = norms[o * inner + i];
            for j in 0..len {
                dx[at(j)] = (g[at(j)] - y[at(j)] * dot) / n;
            }
        }
    }
    dx
}

/// Per-channel statistics of `[N, C, rest..]` as `(count, mean, biased var)`.
pub fn channel_stats<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    inner: usize,
) -> (usize, Vec<S>, Vec<S>) {
    let m = n * inner;
    let mf = S::from_usize_lossy(m);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut s = S::zero();
        for b in 0..n {
            s += x[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                .iter()
                .copied()
                .sum::<S>();
        }
        let mu = s / mf;
        let mut v = S::zero();
        for b in 0..n {
            for &val in &x[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / mf;
    }
    (m, mean, var)
}
