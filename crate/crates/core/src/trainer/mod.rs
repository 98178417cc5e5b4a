//! Policy-gradient training over agent lifetimes.
//!
//! A trajectory is one agent's life. Rewards are zero except -1 on the step
//! the agent dies, returns are discounted sums of those, and the loss is the
//! usual policy gradient with a learned value baseline. Gradients are
//! accumulated per trajectory and quantized to fixed point (see
//! [`GradPacket`]) so that summing them is exact and independent of how the
//! batch was split across workers.

mod optim;
mod packet;
mod rollout;

pub use optim::{adam_step, clip_gradients, AdamHyper, AdamState, OptimState};
pub use packet::{compute_packet, BatchStats, GradPacket, GRAD_SCALE};
pub use rollout::{env_seed, Decision, PendingAction, RolloutEnv, StepRecord, Trajectory};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::Arc;

use crate::config::Config;
use crate::neural::{NeuralError, Policy, PolicyParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty reward list")]
    EmptyRewards,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("observation: {0}")]
    Observation(String),
    #[error("world: {0}")]
    World(String),
}

/// `R_t = sum_{k >= t} gamma^(k-t) r_k`, computed back to front.
pub fn returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, TrainError> {
    if rewards.is_empty() {
        return Err(TrainError::EmptyRewards);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Per-step loss terms and the derivatives backward needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PgLoss {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// dL/dlog_prob for each step; the advantage is treated as a constant.
    pub d_logp: Vec<f64>,
    /// dL/dV for each step; the return is treated as a constant.
    pub d_value: Vec<f64>,
    pub returns: Vec<f64>,
}

/// `sum_t [ -log_prob_t * (R_t - V_t) + value_coef * (R_t - V_t)^2 ]`.
pub fn pg_loss(
    rewards: &[f64],
    log_probs: &[f64],
    values: &[f64],
    gamma: f64,
    value_coef: f64,
) -> Result<PgLoss, TrainError> {
    if log_probs.len() != rewards.len() || values.len() != rewards.len() {
        return Err(TrainError::LengthMismatch(format!(
            "{} rewards, {} log-probs, {} values",
            rewards.len(),
            log_probs.len(),
            values.len()
        )));
    }
    let rets = returns(rewards, gamma)?;
    let mut out = PgLoss {
        loss: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        d_logp: Vec::with_capacity(rets.len()),
        d_value: Vec::with_capacity(rets.len()),
        returns: rets.clone(),
    };
    for t in 0..rets.len() {
        let adv = rets[t] - values[t];
        out.policy_loss += -log_probs[t] * adv;
        out.value_loss += value_coef * adv * adv;
        out.d_logp.push(-adv);
        out.d_value.push(-2.0 * value_coef * adv);
    }
    out.loss = out.policy_loss + out.value_loss;
    Ok(out)
}

/// Round-robin population for the `spawn_index`-th spawn.
pub fn assign_population(spawn_index: u64, n_populations: usize) -> usize {
    (spawn_index % n_populations.max(1) as u64) as usize
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_lifetime: f64,
    pub mean_return: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub grad_norm: f64,
    pub actions: u64,
    pub trajectories: u64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,mean_lifetime,mean_return,value_loss,policy_loss,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.mean_lifetime, self.mean_return, self.value_loss, self.policy_loss, self.grad_norm
        )
    }
}

/// One optimizer update from an aggregated packet.
///
/// The packet holds gradient sums; they are divided by the action count, so
/// the loss being minimized is the per-action mean. Shared tables always
/// update; a population block updates only if the packet has data for it.
pub fn train_step(
    params: &mut PolicyParams<f32>,
    optim: &mut OptimState,
    packet: &GradPacket,
) -> Result<StepMetrics, TrainError> {
    let stats = &packet.stats;
    if stats.actions == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if packet.shared.len() != params.shared.len() || packet.pops.keys().any(|&p| p >= params.pops.len()) {
        return Err(TrainError::Shape("packet does not match parameters".into()));
    }
    let n = stats.actions as f64;
    let to_f32 = |v: &[i64]| -> Vec<f32> { v.iter().map(|&q| (q as f64 / GRAD_SCALE / n) as f32).collect() };
    let mut shared = to_f32(&packet.shared);
    let mut pops: Vec<(usize, Vec<f32>)> = packet.pops.iter().map(|(&p, g)| (p, to_f32(g))).collect();
    let sq: f64 = shared.iter().chain(pops.iter().flat_map(|(_, g)| g)).map(|&g| (g as f64) * (g as f64)).sum();

    clip_gradients(&mut shared, optim.hyper.grad_clip);
    adam_step(&mut params.shared, &shared, &mut optim.shared, &optim.hyper)?;
    for (p, g) in &mut pops {
        if g.len() != params.pops[*p].len() {
            return Err(TrainError::Shape(format!("population {p} gradient length")));
        }
        clip_gradients(g, optim.hyper.grad_clip);
        adam_step(&mut params.pops[*p], g, &mut optim.pops[*p], &optim.hyper)?;
    }
    optim.steps += 1;

    let completed = stats.completed.max(1) as f64;
    Ok(StepMetrics {
        step: optim.steps,
        mean_lifetime: stats.lifetime_sum as f64 / completed,
        mean_return: stats.return_sum as f64 / GRAD_SCALE / stats.trajectories.max(1) as f64,
        value_loss: stats.value_loss_sum as f64 / GRAD_SCALE / n,
        policy_loss: stats.policy_loss_sum as f64 / GRAD_SCALE / n,
        grad_norm: sq.sqrt(),
        actions: stats.actions,
        trajectories: stats.trajectories,
    })
}

/// Seed offset that keeps evaluation maps apart from training maps.
const EVAL_SALT: u64 = 0x5EED_0E7A_1000_0000;

/// Mean lifetime of every agent that appears in one episode of `ticks`
/// ticks on a fresh map. Agents still alive at the end count with their age
/// so far.
pub fn episode_lifetime(policy: &mut Policy<f32>, cfg: &Config, episode: u32, ticks: u64) -> Result<f64, TrainError> {
    let mut c = cfg.clone();
    c.seed = env_seed(cfg.seed ^ EVAL_SALT, episode);
    let mut env = RolloutEnv::new(&c, 0)?;
    let (mut sum, mut n) = (0u64, 0u64);
    for _ in 0..ticks {
        let out = env.tick_local(policy)?;
        for d in &out.events.deaths {
            sum += d.lifetime;
            n += 1;
        }
        env.take_finished();
    }
    for a in env.state.agents.values() {
        sum += env.state.tick - a.spawn_tick;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum as f64 / n as f64 })
}

/// [`episode_lifetime`] for episodes `0..episodes`.
pub fn evaluate_lifetime(params: &PolicyParams<f32>, cfg: &Config, episodes: u32, ticks: u64) -> Result<Vec<f64>, TrainError> {
    let mut policy = Policy::new(Arc::new(params.clone()));
    (0..episodes).map(|e| episode_lifetime(&mut policy, cfg, e, ticks)).collect()
}
