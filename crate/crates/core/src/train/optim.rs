//! AdamW with decoupled weight decay and the MultiStep schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update:
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    if state.m.len() != param.len() {
        *state = Moments::zeros(param.len());
    }
    state.t += 1;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let wd = weight_decay;
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let p = param[i] as f64;
        param[i] = (p - lr * (m / c1) / ((v / c2).sqrt() + eps) - lr * wd * p) as f32;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step<'a>(
        &mut self,
        ps: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'a str, &'a [f32])>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = ps.get_mut(name)?;
            if !p.requires_grad() {
                continue;
            }
            if g.len() != p.numel() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let st = self.state.entry(name.to_string()).or_default();
            adamw_step(
                p.data_mut(),
                g,
                st,
                lr,
                self.betas,
                self.eps,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: `lr0 · gamma^(#milestones ≤ epoch)`.
pub fn multistep_lr(epoch: usize, lr0: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * gamma.powi(passed as i32)
}

/// Milestones at 50% and 75% of the run.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 3 / 4]
}
