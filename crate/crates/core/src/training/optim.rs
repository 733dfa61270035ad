use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f64> {
    pub step: u64,
    pub m: TensorMap<S>,
    pub v: TensorMap<S>,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self {
            step: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }
}

fn check_shapes<S: Scalar>(name: &str, p: &Tensor<S>, g: &Tensor<S>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            name,
            format!("parameter {:?} but gradient {:?}", p.shape(), g.shape()),
        ));
    }
    Ok(())
}

/// One Adam step with decoupled weight decay over the parameters named in
/// `grads`. Parameters missing from `grads` are left untouched; `decays`
/// decides per name whether weight decay applies.
pub fn adam_step<S: Scalar>(
    params: &mut TensorMap<S>,
    grads: &TensorMap<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
    lr: f64,
    weight_decay: f64,
    decays: impl Fn(&str) -> bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = S::from_f64_lossy(1.0 - b1.powi(t));
    let c2 = S::from_f64_lossy(1.0 - b2.powi(t));
    let (b1, b2) = (S::from_f64_lossy(b1), S::from_f64_lossy(b2));
    let eps = S::from_f64_lossy(cfg.eps);
    let lr_s = S::from_f64_lossy(lr);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        check_shapes(name, p, g)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let shrink = if decays(name) {
            S::one() - S::from_f64_lossy(lr * weight_decay)
        } else {
            S::one()
        };
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = b1 * md[i] + (S::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (S::one() - b2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            *x = *x * shrink - lr_s * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// `v ← μ v + g; p ← p − lr (v + wd p)`. With `μ = 0` this is plain SGD.
pub fn sgd_step<S: Scalar>(
    params: &mut TensorMap<S>,
    grads: &TensorMap<S>,
    velocity: &mut TensorMap<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mu, wd) = (
        S::from_f64_lossy(lr),
        S::from_f64_lossy(momentum),
        S::from_f64_lossy(weight_decay),
    );
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        check_shapes(name, p, g)?;
        if momentum == 0.0 {
            for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *x = *x - lr * (gi + wd * *x);
            }
            continue;
        }
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *x = *x - lr * (*vi + wd * *x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(name: &str, t: Tensor) -> TensorMap {
        [(name.to_string(), t)].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p0 = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let mut p = map("w", p0.clone());
        let g = map("w", Tensor::zeros(&[3]));
        let mut st = AdamState::default();
        adam_step(
            &mut p,
            &g,
            &mut st,
            &AdamConfig::default(),
            1e-3,
            0.0,
            |_| true,
        )
        .unwrap();
        assert_eq!(p["w"], p0);
        sgd_step(&mut p, &g, &mut TensorMap::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p["w"], p0);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = map("w", Tensor::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap());
        let g = map("w", Tensor::from_f64(&[3], &[3.0, -0.01, 250.0]).unwrap());
        let mut st = AdamState::default();
        adam_step(
            &mut p,
            &g,
            &mut st,
            &AdamConfig::default(),
            1e-3,
            0.0,
            |_| true,
        )
        .unwrap();
        for (x, s) in p["w"].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-8, "{x}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn weight_decay_is_decoupled_and_selective() {
        let mut p: TensorMap = [
            ("a".to_string(), Tensor::from_f64(&[1], &[2.0]).unwrap()),
            ("b".to_string(), Tensor::from_f64(&[1], &[2.0]).unwrap()),
        ]
        .into_iter()
        .collect();
        let g: TensorMap = p.keys().map(|k| (k.clone(), Tensor::zeros(&[1]))).collect();
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1, 0.5, |n| {
            n == "a"
        })
        .unwrap();
        assert!((p["a"].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(p["b"].item(), 2.0);
    }

    #[test]
    fn plain_sgd_is_exact() {
        let mut p = map("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let g = map("w", Tensor::from_f64(&[2], &[0.5, -4.0]).unwrap());
        sgd_step(&mut p, &g, &mut TensorMap::new(), 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p["w"].data(), &[1.0 - 0.1 * 0.5, 2.0 - 0.1 * -4.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = map("w", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let g = map("w", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let mut vel = TensorMap::new();
        sgd_step(&mut p, &g, &mut vel, 1.0, 0.5, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut vel, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(p["w"].item(), -1.0 - 1.5);
    }

    #[test]
    fn mismatched_gradient_shape_is_error() {
        let mut p = map("w", Tensor::zeros(&[2]));
        let g = map("w", Tensor::zeros(&[3]));
        assert!(sgd_step(&mut p, &g, &mut TensorMap::new(), 0.1, 0.0, 0.0).is_err());
        assert!(adam_step(
            &mut p,
            &g,
            &mut AdamState::default(),
            &AdamConfig::default(),
            0.1,
            0.0,
            |_| true
        )
        .is_err());
    }
}
