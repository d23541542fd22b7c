use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::models::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    /// `lr = 0` is accepted so that a run can exercise the loop without moving weights.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moments per parameter, created at zero on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState<T = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// Scales every gradient so that their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// One AdamW update of every parameter named in `grads`:
///
/// ```text
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr m_hat / (sqrt(v_hat) + eps) - lr wd theta
/// ```
///
/// All gradients are checked before anything is modified, so a rejected
/// step leaves parameters and state untouched.
pub fn adamw_step<T: Scalar>(
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params.get(name).map_err(|_| TrainError::GradientMismatch { param: name.clone() })?;
        if p.shape() != g.shape() {
            return Err(TrainError::GradientMismatch { param: name.clone() });
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi.to_f64_lossy();
            let mn = cfg.beta1 * mi.to_f64_lossy() + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * vi.to_f64_lossy() + (1.0 - cfg.beta2) * gi * gi;
            *mi = T::from_f64_lossy(mn);
            *vi = T::from_f64_lossy(vn);
            if cfg.lr == 0.0 {
                continue;
            }
            let th = theta.to_f64_lossy();
            let update = cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * th;
            *theta = T::from_f64_lossy(th - update);
        }
    }
    Ok(())
}
