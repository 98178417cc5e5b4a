use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rollout::Trajectory;
use super::{pg_loss, TrainError};
use crate::config::Config;
use crate::neural::{LossSeed, Policy};
use crate::obsio::Schema;

/// Fixed-point scale for gradient sums: 2^32.
pub const GRAD_SCALE: f64 = 4_294_967_296.0;

fn quantize(x: f64) -> i64 {
    (x * GRAD_SCALE).round() as i64
}

/// Batch bookkeeping, fixed point where fractional, so merging is exact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub trajectories: u64,
    pub actions: u64,
    /// Death-terminated trajectories.
    pub completed: u64,
    pub lifetime_sum: u64,
    /// Sum of R_0 over trajectories.
    pub return_sum: i64,
    pub value_loss_sum: i64,
    pub policy_loss_sum: i64,
    /// Trajectories dropped for non-finite gradients.
    pub dropped: u64,
}

impl BatchStats {
    fn merge(&mut self, o: &BatchStats) {
        self.trajectories += o.trajectories;
        self.actions += o.actions;
        self.completed += o.completed;
        self.lifetime_sum += o.lifetime_sum;
        self.return_sum += o.return_sum;
        self.value_loss_sum += o.value_loss_sum;
        self.policy_loss_sum += o.policy_loss_sum;
        self.dropped += o.dropped;
    }
}

/// Summed gradients of a set of trajectories.
///
/// Each trajectory's gradient is rounded to a multiple of 2^-32 before it is
/// added, so sums are exact integers: any split of the same trajectories
/// across workers, merged in any order, gives the same packet.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradPacket {
    pub shared: Vec<i64>,
    pub pops: BTreeMap<usize, Vec<i64>>,
    pub stats: BatchStats,
}

impl GradPacket {
    pub fn merge(&mut self, other: &GradPacket) {
        if self.shared.is_empty() {
            self.shared = vec![0; other.shared.len()];
        }
        for (a, b) in self.shared.iter_mut().zip(&other.shared) {
            *a += *b;
        }
        for (p, g) in &other.pops {
            let mine = self.pops.entry(*p).or_insert_with(|| vec![0; g.len()]);
            for (a, b) in mine.iter_mut().zip(g) {
                *a += *b;
            }
        }
        self.stats.merge(&other.stats);
    }

    pub fn sum<'a>(packets: impl IntoIterator<Item = &'a GradPacket>) -> GradPacket {
        let mut out = GradPacket::default();
        for p in packets {
            out.merge(p);
        }
        out
    }

    /// Element-wise mean over contributing packets, in gradient units.
    pub fn average(packets: &[GradPacket]) -> (Vec<f64>, BTreeMap<usize, Vec<f64>>) {
        let total = GradPacket::sum(packets);
        let n = packets.len().max(1) as f64;
        let conv = |v: &[i64]| v.iter().map(|&q| q as f64 / GRAD_SCALE / n).collect::<Vec<_>>();
        (conv(&total.shared), total.pops.iter().map(|(p, g)| (*p, conv(g))).collect())
    }
}

/// Recomputes every step of `trajectories` under the policy's current
/// parameters and sums the loss gradients.
pub fn compute_packet(
    policy: &mut Policy<f32>,
    trajectories: &[Trajectory],
    cfg: &Config,
    schema: &Schema,
) -> Result<GradPacket, TrainError> {
    let mut packet = GradPacket { shared: vec![0; policy.spec().shared_layout.len], ..Default::default() };
    for traj in trajectories {
        if traj.steps.is_empty() {
            continue;
        }
        let mut traces = Vec::with_capacity(traj.steps.len());
        for s in &traj.steps {
            let obs = s.obs.decode(schema).map_err(|e| TrainError::Observation(e.to_string()))?;
            traces.push(policy.evaluate(&obs, s.choices.map(usize::from))?);
        }
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward as f64).collect();
        let logps: Vec<f64> = traces.iter().map(|t| t.log_prob() as f64).collect();
        let values: Vec<f64> = traces.iter().map(|t| t.value as f64).collect();
        let loss = pg_loss(&rewards, &logps, &values, cfg.gamma, cfg.value_coef)?;
        let mut sink = policy.sink(traj.population);
        for (t, trace) in traces.iter().enumerate() {
            let seed = LossSeed {
                d_logp: loss.d_logp[t] as f32,
                d_value: loss.d_value[t] as f32,
                d_entropy: -cfg.entropy_coef as f32,
            };
            policy.backward(trace, seed, &mut sink)?;
        }
        let grads = policy.finish(sink)?;
        if grads.shared.iter().chain(&grads.local).any(|g| !g.is_finite()) {
            log::warn!("agent {}: non-finite gradient, trajectory dropped", traj.agent_id);
            packet.stats.dropped += 1;
            continue;
        }
        for (a, g) in packet.shared.iter_mut().zip(&grads.shared) {
            *a += quantize(*g as f64);
        }
        let local = packet.pops.entry(traj.population).or_insert_with(|| vec![0; grads.local.len()]);
        for (a, g) in local.iter_mut().zip(&grads.local) {
            *a += quantize(*g as f64);
        }
        let st = &mut packet.stats;
        st.trajectories += 1;
        st.actions += traj.steps.len() as u64;
        if traj.terminal {
            st.completed += 1;
            st.lifetime_sum += traj.steps.len() as u64;
        }
        st.return_sum += quantize(loss.returns[0]);
        st.value_loss_sum += quantize(loss.value_loss);
        st.policy_loss_sum += quantize(loss.policy_loss);
    }
    Ok(packet)
}
