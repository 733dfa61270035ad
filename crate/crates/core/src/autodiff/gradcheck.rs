use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorMap;

use super::eval::{backward, evaluate, Mode};
use super::graph::{Graph, NodeId};

/// Worst entry found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compare reverse-mode gradients of the scalar `seed` with central finite
/// differences over every entry of `params`.
///
/// The error of one entry is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<S: Scalar>(
    graph: &Graph<S>,
    feeds: &[&TensorMap<S>],
    params: &TensorMap<S>,
    seed: NodeId,
    eps: S,
    mode: Mode,
) -> Result<GradCheckReport> {
    if !(eps > S::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut all: Vec<&TensorMap<S>> = vec![params];
    all.extend_from_slice(feeds);
    let base = evaluate(graph, &all, mode)?;
    let grads = backward(graph, &base, seed)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work = params.clone();
    let two_eps = eps + eps;
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("`{name}` is not a leaf of the graph")))?;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            let mut probe = |delta: S| -> Result<S> {
                work.get_mut(name).unwrap().data_mut()[i] = orig + delta;
                let mut f: Vec<&TensorMap<S>> = vec![&work];
                f.extend_from_slice(feeds);
                let e = evaluate(graph, &f, mode)?;
                Ok(e.value(seed).item())
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = ((plus - minus) / two_eps).lossy_f64();
            let a = analytic.data()[i].lossy_f64();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
