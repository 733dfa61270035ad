use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_strides, for_each_broadcast, strides, Tensor, TensorMap};

use super::graph::{Graph, NodeId, Op};
use super::kernels::{self, split_axis, Conv1dDims, Conv2dDims};

/// Batch-normalization behaviour during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Per-batch statistics; the batch moments are recorded for the caller.
    Train,
    /// Running statistics looked up from the feeds.
    Eval,
}

#[derive(Clone, Debug)]
enum Aux<S> {
    None,
    Argmax(Vec<usize>),
    Norms(Vec<S>),
    Bn {
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
}

/// Batch moments observed by one batch-norm node in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<S> {
    pub running_mean: String,
    pub running_var: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Result of a forward pass: the value of every node.
#[derive(Clone, Debug)]
pub struct Evaluation<S = f64> {
    values: Vec<Tensor<S>>,
    aux: Vec<Aux<S>>,
    bn_updates: Vec<BnUpdate<S>>,
    pub mode: Mode,
}

impl<S: Scalar> Evaluation<S> {
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn output<'a>(&'a self, graph: &Graph<S>, name: &str) -> Option<&'a Tensor<S>> {
        graph.output(name).map(|id| self.value(id))
    }

    /// All marked outputs of `graph`, by name.
    pub fn outputs(&self, graph: &Graph<S>) -> TensorMap<S> {
        graph
            .outputs()
            .iter()
            .map(|(n, id)| (n.clone(), self.value(*id).clone()))
            .collect()
    }

    pub fn bn_updates(&self) -> &[BnUpdate<S>] {
        &self.bn_updates
    }
}

fn lookup<'a, S>(feeds: &[&'a TensorMap<S>], name: &str) -> Option<&'a Tensor<S>> {
    feeds.iter().find_map(|m| m.get(name))
}

fn binary_forward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if a.shape() == b.shape() {
        return a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = vec![S::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    out
}

fn permute_forward<S: Scalar>(x: &Tensor<S>, perm: &[usize], out_shape: &[usize]) -> Vec<S> {
    let st = strides(x.shape());
    let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let mut out = vec![S::zero(); x.len()];
    let xd = x.data();
    for_each_broadcast(out_shape, &ps, &ps, |o, i, _| out[o] = xd[i]);
    out
}

/// Run the graph forward. Every `Input`/`Param` leaf must be bound in one of
/// `feeds` (searched in order) with exactly the declared shape.
pub fn evaluate<S: Scalar>(
    graph: &Graph<S>,
    feeds: &[&TensorMap<S>],
    mode: Mode,
) -> Result<Evaluation<S>> {
    let mut values: Vec<Tensor<S>> = Vec::with_capacity(graph.len());
    let mut aux = Vec::with_capacity(graph.len());
    let mut bn_updates = Vec::new();

    for node in graph.nodes() {
        let arg = |k: usize| -> &Tensor<S> { &values[node.inputs[k].0] };
        let shape = node.shape.as_slice();
        let mut node_aux = Aux::None;
        let data: Vec<S> = match &node.op {
            Op::Input(name) | Op::Param(name) => {
                let t = lookup(feeds, name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.shape() != shape {
                    return Err(Error::shape(
                        &node.label,
                        format!(
                            "bound tensor has shape {:?}, declared {:?}",
                            t.shape(),
                            shape
                        ),
                    ));
                }
                t.data().to_vec()
            }
            Op::Const(t) => t.data().to_vec(),
            Op::Add => binary_forward(arg(0), arg(1), shape, |x, y| x + y),
            Op::Sub => binary_forward(arg(0), arg(1), shape, |x, y| x - y),
            Op::Mul => binary_forward(arg(0), arg(1), shape, |x, y| x * y),
            Op::Scale(c) => arg(0).data().iter().map(|&v| v * *c).collect(),
            Op::AddScalar(c) => arg(0).data().iter().map(|&v| v + *c).collect(),
            Op::Relu => arg(0)
                .data()
                .iter()
                .map(|&v| if v > S::zero() { v } else { S::zero() })
                .collect(),
            Op::Tanh => arg(0).data().iter().map(|v| v.tanh()).collect(),
            Op::Exp => arg(0).data().iter().map(|v| v.exp()).collect(),
            Op::Log => arg(0).data().iter().map(|v| v.ln()).collect(),
            Op::Neg => arg(0).data().iter().map(|&v| -v).collect(),
            Op::GradReverse { .. } => arg(0).data().to_vec(),
            Op::Reshape(_) => arg(0).data().to_vec(),
            Op::MatMul => {
                let (a, b) = (arg(0), arg(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![S::zero(); m * n];
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    a.data(),
                    false,
                    b.data(),
                    false,
                    S::zero(),
                    &mut out,
                );
                out
            }
            Op::Permute(perm) => permute_forward(arg(0), perm, shape),
            Op::Conv1d { pad } => {
                let d = conv1d_dims(arg(0).shape(), arg(1).shape(), *pad, shape);
                kernels::conv1d_forward(arg(0).data(), arg(1).data(), &d)
            }
            Op::Conv2d { stride, pad } => {
                let d = conv2d_dims(arg(0).shape(), arg(1).shape(), *stride, *pad, shape);
                kernels::conv2d_forward(arg(0).data(), arg(1).data(), &d)
            }
            Op::MaxPool1d { size } => {
                let s = arg(0).shape();
                let (out, idx) = kernels::max_pool1d(arg(0).data(), s[0] * s[1], s[2], *size);
                node_aux = Aux::Argmax(idx);
                out
            }
            Op::MaxPool2d { size } => {
                let s = arg(0).shape();
                let (out, idx) = kernels::max_pool2d(arg(0).data(), s[0] * s[1], s[2], s[3], *size);
                node_aux = Aux::Argmax(idx);
                out
            }
            Op::BatchNorm {
                eps,
                running_mean,
                running_var,
            } => {
                let x = arg(0);
                let (gamma, beta) = (arg(1).data(), arg(2).data());
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let (mean, var, train) = match mode {
                    Mode::Train => {
                        let (_, mean, var) = kernels::channel_stats(x.data(), n, c, inner);
                        bn_updates.push(BnUpdate {
                            running_mean: running_mean.clone(),
                            running_var: running_var.clone(),
                            mean: mean.clone(),
                            var: var.clone(),
                        });
                        (mean, var, true)
                    }
                    Mode::Eval => {
                        let fetch = |key: &str| -> Result<Vec<S>> {
                            let t = lookup(feeds, key)
                                .ok_or_else(|| Error::Unbound(key.to_string()))?;
                            if t.shape() != [c] {
                                return Err(Error::shape(
                                    &node.label,
                                    format!("running statistic {key} has shape {:?}", t.shape()),
                                ));
                            }
                            Ok(t.data().to_vec())
                        };
                        (fetch(running_mean)?, fetch(running_var)?, false)
                    }
                };
                let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + *eps).sqrt()).collect();
                let xd = x.data();
                let mut xhat = vec![S::zero(); xd.len()];
                let mut out = vec![S::zero(); xd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for i in r {
                            let h = (xd[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = gamma[ch] * h + beta[ch];
                        }
                    }
                }
                node_aux = Aux::Bn {
                    xhat,
                    inv_std,
                    train,
                };
                out
            }
            Op::Softmax { axis } => kernels::softmax(arg(0).data(), shape, *axis),
            Op::Sum { axis, .. } => kernels::reduce_sum(arg(0).data(), arg(0).shape(), *axis),
            Op::Mean { axis, .. } => {
                let x = arg(0);
                let count = match axis {
                    Some(a) => x.shape()[*a],
                    None => x.len(),
                };
                let inv = S::one() / S::from_usize_lossy(count);
                kernels::reduce_sum(x.data(), x.shape(), *axis)
                    .into_iter()
                    .map(|v| v * inv)
                    .collect()
            }
            Op::L2Normalize { axis } => {
                let (out, norms) = kernels::l2_normalize(arg(0).data(), shape, *axis);
                node_aux = Aux::Norms(norms);
                out
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for k in 0..node.inputs.len() {
                        let t = arg(k);
                        let chunk = t.shape()[*axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                out
            }
            Op::Slice { axis, start, end } => {
                let x = arg(0);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    out.extend_from_slice(
                        &x.data()[(o * len + start) * inner..(o * len + end) * inner],
                    );
                }
                out
            }
        };
        let t = Tensor::new(shape, data)?;
        if !t.all_finite() {
            return Err(Error::NonFinite {
                node: node.label.clone(),
            });
        }
        values.push(t);
        aux.push(node_aux);
    }
    Ok(Evaluation {
        values,
        aux,
        bn_updates,
        mode,
    })
}

fn conv1d_dims(xs: &[usize], ws: &[usize], pad: usize, out: &[usize]) -> Conv1dDims {
    Conv1dDims {
        b: xs[0],
        ci: xs[1],
        l: xs[2],
        co: ws[0],
        k: ws[2],
        pad,
        lo: out[2],
    }
}

fn conv2d_dims(xs: &[usize], ws: &[usize], stride: usize, pad: usize, out: &[usize]) -> Conv2dDims {
    Conv2dDims {
        n: xs[0],
        ci: xs[1],
        h: xs[2],
        w: xs[3],
        co: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
        ho: out[2],
        wo: out[3],
    }
}

/// Gradients of a scalar seed with respect to every named leaf.
#[derive(Clone, Debug)]
pub struct Gradients<S = f64> {
    pub by_name: TensorMap<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn reduce_broadcast<S: Scalar>(
    g: &[S],
    out_shape: &[usize],
    in_shape: &[usize],
    scale_by: Option<&Tensor<S>>,
) -> Vec<S> {
    let n: usize = in_shape.iter().product();
    let mut out = vec![S::zero(); n];
    match scale_by {
        None if in_shape == out_shape => return g.to_vec(),
        Some(other) if in_shape == out_shape && other.shape() == out_shape => {
            return g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        }
        _ => {}
    }
    let si = broadcast_strides(in_shape, out_shape);
    match scale_by {
        None => for_each_broadcast(out_shape, &si, &si, |o, i, _| out[i] += g[o]),
        Some(other) => {
            let so = broadcast_strides(other.shape(), out_shape);
            let od = other.data();
            for_each_broadcast(out_shape, &si, &so, |o, i, j| out[i] += g[o] * od[j]);
        }
    }
    out
}

/// Reverse pass from a scalar `seed`. Leaves the seed does not depend on get
/// zero gradients.
pub fn backward<S: Scalar>(
    graph: &Graph<S>,
    eval: &Evaluation<S>,
    seed: NodeId,
) -> Result<Gradients<S>> {
    let seed_node = graph.node(seed);
    if seed_node.shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarSeed {
            node: seed_node.label.clone(),
            shape: seed_node.shape.clone(),
        });
    }
    let mut grads: Vec<Option<Vec<S>>> = vec![None; graph.len()];
    grads[seed.0] = Some(vec![S::one()]);

    for idx in (0..=seed.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &graph.nodes()[idx];
        let val = |k: usize| eval.value(node.inputs[k]);
        let out = &eval.values[idx];
        let shape = node.shape.as_slice();
        let mut push = |k: usize, gi: Vec<S>| {
            let target = node.inputs[k].0;
            accumulate(&mut grads[target], gi);
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {
                grads[idx] = Some(g);
                continue;
            }
            Op::Add => {
                push(0, reduce_broadcast(&g, shape, val(0).shape(), None));
                push(1, reduce_broadcast(&g, shape, val(1).shape(), None));
            }
            Op::Sub => {
                push(0, reduce_broadcast(&g, shape, val(0).shape(), None));
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                push(1, reduce_broadcast(&neg, shape, val(1).shape(), None));
            }
            Op::Mul => {
                push(0, reduce_broadcast(&g, shape, val(0).shape(), Some(val(1))));
                push(1, reduce_broadcast(&g, shape, val(1).shape(), Some(val(0))));
            }
            Op::Scale(c) => push(0, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(_) | Op::Reshape(_) => push(0, g),
            Op::GradReverse { lambda } => push(0, g.iter().map(|&v| -(v * *lambda)).collect()),
            Op::Neg => push(0, g.iter().map(|&v| -v).collect()),
            Op::Relu => push(
                0,
                g.iter()
                    .zip(val(0).data())
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                    .collect(),
            ),
            Op::Tanh => push(
                0,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (S::one() - y * y))
                    .collect(),
            ),
            Op::Exp => push(
                0,
                g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect(),
            ),
            Op::Log => push(
                0,
                g.iter()
                    .zip(val(0).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect(),
            ),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![S::zero(); m * k];
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    &g,
                    false,
                    b.data(),
                    true,
                    S::zero(),
                    &mut ga,
                );
                let mut gb = vec![S::zero(); k * n];
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    a.data(),
                    true,
                    &g,
                    false,
                    S::zero(),
                    &mut gb,
                );
                push(0, ga);
                push(1, gb);
            }
            Op::Permute(perm) => {
                let x = val(0);
                let st = strides(x.shape());
                let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let mut gx = vec![S::zero(); x.len()];
                for_each_broadcast(shape, &ps, &ps, |o, i, _| gx[i] = g[o]);
                push(0, gx);
            }
            Op::Conv1d { pad } => {
                let d = conv1d_dims(val(0).shape(), val(1).shape(), *pad, shape);
                let (gx, gw) = kernels::conv1d_backward(val(0).data(), val(1).data(), &g, &d);
                push(0, gx);
                push(1, gw);
            }
            Op::Conv2d { stride, pad } => {
                let d = conv2d_dims(val(0).shape(), val(1).shape(), *stride, *pad, shape);
                let (gx, gw) = kernels::conv2d_backward(val(0).data(), val(1).data(), &g, &d);
                push(0, gx);
                push(1, gw);
            }
            Op::MaxPool1d { .. } | Op::MaxPool2d { .. } => {
                let Aux::Argmax(arg) = &eval.aux[idx] else {
                    unreachable!()
                };
                let mut gx = vec![S::zero(); val(0).len()];
                for (&src, &gv) in arg.iter().zip(&g) {
                    gx[src] += gv;
                }
                push(0, gx);
            }
            Op::BatchNorm { .. } => {
                let Aux::Bn {
                    xhat,
                    inv_std,
                    train,
                } = &eval.aux[idx]
                else {
                    unreachable!()
                };
                let gamma = val(1).data();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = S::from_usize_lossy(n * inner);
                let mut ggamma = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                let mut gx = vec![S::zero(); g.len()];
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (S::zero(), S::zero());
                    for b in 0..n {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let k = gamma[ch] * inv_std[ch];
                    for b in 0..n {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            gx[i] = if *train {
                                k * (g[i] - sum_g / m - xhat[i] * sum_gx / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                push(0, gx);
                push(1, ggamma);
                push(2, gbeta);
            }
            Op::Softmax { axis } => {
                push(0, kernels::softmax_backward(out.data(), &g, shape, *axis))
            }
            Op::Sum { axis, .. } => {
                push(0, kernels::expand_sum(&g, val(0).shape(), *axis, S::one()))
            }
            Op::Mean { axis, .. } => {
                let x = val(0);
                let count = match axis {
                    Some(a) => x.shape()[*a],
                    None => x.len(),
                };
                let inv = S::one() / S::from_usize_lossy(count);
                push(0, kernels::expand_sum(&g, x.shape(), *axis, inv));
            }
            Op::L2Normalize { axis } => {
                let Aux::Norms(norms) = &eval.aux[idx] else {
                    unreachable!()
                };
                push(
                    0,
                    kernels::l2_normalize_backward(out.data(), norms, &g, shape, *axis),
                );
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut parts: Vec<Vec<S>> = node
                    .inputs
                    .iter()
                    .map(|&i| Vec::with_capacity(eval.value(i).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, part) in parts.iter_mut().enumerate() {
                        let chunk = val(k).shape()[*axis] * inner;
                        part.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (k, part) in parts.into_iter().enumerate() {
                    push(k, part);
                }
            }
            Op::Slice { axis, start, end } => {
                let x = val(0);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut gx = vec![S::zero(); x.len()];
                let w = (end - start) * inner;
                for o in 0..outer {
                    gx[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                push(0, gx);
            }
        }
    }

    let mut by_name = TensorMap::new();
    for (idx, node) in graph.nodes().iter().enumerate() {
        if let Op::Input(name) | Op::Param(name) = &node.op {
            let data = grads[idx]
                .take()
                .unwrap_or_else(|| vec![S::zero(); node.shape.iter().product()]);
            by_name.insert(name.clone(), Tensor::new(&node.shape, data)?);
        }
    }
    Ok(Gradients { by_name })
}
