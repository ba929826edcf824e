use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Contract(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape().clone())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `names` label errors; a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || names.len() != n {
        return Err(Error::Contract(format!(
            "adam step over {n} parameters got {} gradients and {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient of {} has shape {}, parameter {}",
                names[i],
                g.shape(),
                p.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} at element {j}",
                names[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((w, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *w -= cfg.lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
