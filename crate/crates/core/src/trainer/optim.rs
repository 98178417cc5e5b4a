use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::config::Config;
use crate::neural::PolicyParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &Config) -> Self {
        Self { lr: cfg.lr, weight_decay: cfg.weight_decay, grad_clip: cfg.grad_clip, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moments for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Moments for the shared block and each population block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub hyper: AdamHyper,
    pub shared: AdamState,
    pub pops: Vec<AdamState>,
    /// Completed optimizer steps.
    pub steps: u64,
}

impl OptimState {
    pub fn new(params: &PolicyParams<f32>, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            shared: AdamState::new(params.shared.len()),
            pops: params.pops.iter().map(|p| AdamState::new(p.len())).collect(),
            steps: 0,
        }
    }
}

/// Element-wise clamp to `[-limit, limit]`.
pub fn clip_gradients(grads: &mut [f32], limit: f64) {
    let l = limit as f32;
    for g in grads {
        *g = g.clamp(-l, l);
    }
}

/// Adam with decoupled weight decay, applied before the moment update.
/// A non-finite gradient leaves everything untouched.
pub fn adam_step(params: &mut [f32], grads: &[f32], st: &mut AdamState, hp: &AdamHyper) -> Result<(), TrainError> {
    if params.len() != grads.len() || st.m.len() != params.len() {
        return Err(TrainError::Shape(format!("{} params, {} grads, {} moments", params.len(), grads.len(), st.m.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient, batch dropped");
        return Err(TrainError::NonFinite);
    }
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let mut p = params[i] as f64;
        p -= hp.lr * hp.weight_decay * p;
        let g = grads[i] as f64;
        let m = hp.beta1 * st.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * st.v[i] + (1.0 - hp.beta2) * g * g;
        st.m[i] = m;
        st.v[i] = v;
        p -= hp.lr * (m / c1) / ((v / c2).sqrt() + hp.eps);
        params[i] = p as f32;
    }
    Ok(())
}
