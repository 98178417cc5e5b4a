use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::agents::AgentId;
use crate::config::{Config, RngStream, StreamName};
use crate::engine::{StepOutcome, WorldState};
use crate::neural::{bundle_from_choices, Policy};
use crate::obsio::{build_schema, encode, observe, Observation, Schema, WireObservation};

/// What a client returns for one observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Move, style and target indices.
    pub choices: [u8; 3],
    pub log_prob: f32,
    pub value: f32,
}

impl Decision {
    pub fn from_policy(policy: &mut Policy<f32>, obs: &Observation, uniforms: [f64; 3]) -> Result<Self, TrainError> {
        let (_, t) = policy.forward_with(obs, uniforms)?;
        let c = t.choices();
        Ok(Self { choices: [c[0] as u8, c[1] as u8, c[2] as u8], log_prob: t.log_prob(), value: t.value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: WireObservation,
    pub choices: [u8; 3],
    pub log_prob: f32,
    pub value: f32,
    pub reward: f32,
}

/// One agent lifetime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env: u32,
    pub agent_id: AgentId,
    pub population: usize,
    pub steps: Vec<StepRecord>,
    /// Ended by death rather than cut off.
    pub terminal: bool,
}

/// An agent waiting for a decision this tick.
#[derive(Clone, Debug)]
pub struct PendingAction {
    pub agent: AgentId,
    pub obs: Observation,
    pub wire: WireObservation,
    /// Drawn from the environment's sampling stream, one per head, so the
    /// sample does not depend on which worker evaluates the policy.
    pub uniforms: [f64; 3],
}

/// An environment plus the trajectories of everyone living in it.
pub struct RolloutEnv {
    pub index: u32,
    pub state: WorldState,
    sampler: RngStream,
    schema: Schema,
    live: BTreeMap<AgentId, Trajectory>,
    finished: Vec<Trajectory>,
    finished_actions: usize,
}

/// Seed of environment `index` under a run seed.
pub fn env_seed(seed: u64, index: u32) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl RolloutEnv {
    pub fn new(cfg: &Config, index: u32) -> Result<Self, TrainError> {
        let mut c = cfg.clone();
        c.seed = env_seed(cfg.seed, index);
        let state = WorldState::new(c.clone()).map_err(|e| TrainError::World(e.to_string()))?;
        Ok(Self {
            index,
            state,
            sampler: RngStream::new(c.seed, StreamName::PolicySampling),
            schema: build_schema(cfg),
            live: BTreeMap::new(),
            finished: Vec::new(),
            finished_actions: 0,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Observations for every living agent, ascending id.
    pub fn pending(&mut self) -> Result<Vec<PendingAction>, TrainError> {
        let ids: Vec<AgentId> = self.state.agents.keys().copied().collect();
        ids.into_iter()
            .map(|agent| {
                let obs = observe(&self.state, agent).map_err(|e| TrainError::Observation(e.to_string()))?;
                let wire = encode(&obs);
                let uniforms = [self.sampler.unit(), self.sampler.unit(), self.sampler.unit()];
                Ok(PendingAction { agent, obs, wire, uniforms })
            })
            .collect()
    }

    /// Records decisions, steps the world and closes trajectories of the dead.
    pub fn apply(&mut self, pending: Vec<PendingAction>, decisions: &[Decision]) -> Result<StepOutcome, TrainError> {
        if pending.len() != decisions.len() {
            return Err(TrainError::LengthMismatch(format!("{} observations, {} decisions", pending.len(), decisions.len())));
        }
        let mut actions = BTreeMap::new();
        for (p, d) in pending.into_iter().zip(decisions) {
            if d.choices[0] as usize >= 5 || d.choices[1] as usize >= 3 || d.choices[2] as usize >= p.obs.agents.len() {
                return Err(TrainError::Shape(format!("decision {:?} out of range", d.choices)));
            }
            actions.insert(p.agent, bundle_from_choices(&p.obs, d.choices.map(usize::from)));
            let population = self.state.agents[&p.agent].population;
            let env = self.index;
            let traj = self.live.entry(p.agent).or_insert_with(|| Trajectory {
                env,
                agent_id: p.agent,
                population,
                steps: Vec::new(),
                terminal: false,
            });
            traj.steps.push(StepRecord { obs: p.wire, choices: d.choices, log_prob: d.log_prob, value: d.value, reward: 0.0 });
        }
        let out = self.state.step(&actions);
        for (id, r) in &out.rewards {
            if let Some(step) = self.live.get_mut(id).and_then(|t| t.steps.last_mut()) {
                step.reward = *r as f32;
            }
        }
        for death in &out.events.deaths {
            if let Some(mut t) = self.live.remove(&death.agent) {
                t.terminal = true;
                self.finished_actions += t.steps.len();
                self.finished.push(t);
            }
        }
        Ok(out)
    }

    /// One tick with a local policy.
    pub fn tick_local(&mut self, policy: &mut Policy<f32>) -> Result<StepOutcome, TrainError> {
        let pending = self.pending()?;
        let decisions = pending
            .iter()
            .map(|p| Decision::from_policy(policy, &p.obs, p.uniforms))
            .collect::<Result<Vec<_>, _>>()?;
        self.apply(pending, &decisions)
    }

    /// Actions in finished trajectories not yet taken.
    pub fn finished_actions(&self) -> usize {
        self.finished_actions
    }

    pub fn take_finished(&mut self) -> Vec<Trajectory> {
        self.finished_actions = 0;
        std::mem::take(&mut self.finished)
    }

    /// Steps held in memory for each living agent.
    pub fn retained_steps(&self) -> BTreeMap<AgentId, usize> {
        self.live.iter().map(|(id, t)| (*id, t.steps.len())).collect()
    }
}
