//! Hand-written baseline policies.

use std::fmt;
use std::str::FromStr;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agents::AgentId;
use crate::engine::WorldState;
use crate::obsio::observe;

use crate::config::{AttackRule, Config, RngStream, StreamName};
use crate::engine::{ActionBundle, Attack, Move, Style, Target};
use crate::obsio::{ObsError, Observation};
use crate::world::Terrain;

#[derive(Debug, Error, PartialEq)]
pub enum ScriptError {
    #[error("unknown scripted policy `{0}` (expected idle, random, forager or aggressor)")]
    UnknownVariant(String),
    #[error(transparent)]
    Observation(#[from] ObsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Idle,
    RandomWalk,
    Forager,
    Aggressor,
}

impl FromStr for Variant {
    type Err = ScriptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Ok(Variant::Idle),
            "random" | "random_walk" | "randomwalk" => Ok(Variant::RandomWalk),
            "forager" => Ok(Variant::Forager),
            "aggressor" => Ok(Variant::Aggressor),
            _ => Err(ScriptError::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Idle => "idle",
            Variant::RandomWalk => "random",
            Variant::Forager => "forager",
            Variant::Aggressor => "aggressor",
        })
    }
}

#[derive(Clone)]
pub struct ScriptedPolicy {
    pub variant: Variant,
    rng: RngStream,
    ranges: [u32; 3],
    damage: [u32; 3],
    level_range: Option<u32>,
    crop: usize,
    water_max: f32,
    water_gain: f32,
    /// Exploration heading per agent, kept while it stays safe.
    headings: BTreeMap<AgentId, Move>,
}

impl ScriptedPolicy {
    pub fn new(variant: Variant, cfg: &Config, lane: u64) -> Self {
        let c = &cfg.combat;
        Self {
            variant,
            rng: RngStream::with_lane(cfg.seed, StreamName::PolicySampling, lane),
            ranges: Style::ALL.map(|s| c.ranges.get(s)),
            damage: Style::ALL.map(|s| c.base_damage.get(s)),
            level_range: match cfg.attack_rule {
                AttackRule::LevelRange(r) => Some(r),
                AttackRule::SpawnSafety(_) => None,
            },
            crop: cfg.obs_crop,
            water_max: cfg.water_max as f32,
            water_gain: cfg.forage_water as f32,
            headings: BTreeMap::new(),
        }
    }

    pub fn act(&mut self, obs: &Observation) -> Result<ActionBundle, ScriptError> {
        if obs.tiles.len() != self.crop * self.crop || obs.agents.is_empty() || !obs.agents[0].is_self() {
            return Err(ObsError::Malformed("observation does not match the scripted policy's crop".into()).into());
        }
        Ok(match self.variant {
            Variant::Idle => ActionBundle::IDLE,
            Variant::RandomWalk => {
                let legal = safe_moves(obs);
                ActionBundle::moving(legal[self.rng.index(legal.len())])
            }
            Variant::Forager => ActionBundle::moving(self.forage_move(obs)),
            Variant::Aggressor => ActionBundle { mv: self.forage_move(obs), attack: self.pick_attack(obs) },
        })
    }

    /// Shortest-path step toward the scarcer resource; explores in a straight line while it is out of view.
    fn forage_move(&mut self, obs: &Observation) -> Move {
        let me = obs.observer();
        let (food, water) = (me.continuous[0], me.continuous[1]);
        let is_forest = |dr: i32, dc: i32| obs.tile_at(dr, dc).is_some_and(|t| t.terrain() == Terrain::Forest);
        let by_water = |dr: i32, dc: i32| {
            [(-1, 0), (1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(a, b)| obs.tile_at(dr + a, dc + b).is_some_and(|t| t.terrain() == Terrain::Water))
        };
        if by_water(0, 0) && water + self.water_gain <= self.water_max {
            return Move::Stay;
        }
        let step = if water < food { first_step(obs, by_water) } else { first_step(obs, is_forest) };
        match step {
            Some(mv) => mv,
            None => self.explore(obs),
        }
    }

    fn explore(&mut self, obs: &Observation) -> Move {
        let id = obs.observer_id();
        let safe: Vec<Move> = safe_moves(obs).into_iter().filter(|m| *m != Move::Stay).collect();
        if safe.is_empty() {
            return Move::Stay;
        }
        if let Some(h) = self.headings.get(&id) {
            if safe.contains(h) && self.rng.unit() >= 0.1 {
                return *h;
            }
        }
        // prefer headings toward the open side of the view, away from the lava rim
        let r = (obs.crop() / 2) as i32;
        let openness = |m: &Move| {
            let (a, b) = m.delta();
            let mut n = 0;
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr * a + dc * b > 0 && obs.tile_at(dr, dc).is_some_and(|t| !t.terrain().lethal()) {
                        n += 1;
                    }
                }
            }
            n
        };
        let best = safe.iter().map(openness).max().unwrap_or(0);
        let pool: Vec<Move> = safe.iter().copied().filter(|m| openness(m) == best).collect();
        let h = pool[self.rng.index(pool.len())];
        self.headings.insert(id, h);
        h
    }

    /// Drops exploration state for agents that are gone.
    pub fn retain_agents(&mut self, alive: impl Fn(AgentId) -> bool) {
        self.headings.retain(|id, _| alive(*id));
    }

    /// Nearest visible agent in range of some style, hit with the hardest-hitting one.
    fn pick_attack(&self, obs: &Observation) -> Option<Attack> {
        let my_level = obs.observer().level();
        let target = obs.agents[1..].iter().find(|a| {
            let d = a.chebyshev();
            self.ranges.iter().any(|&r| d <= r)
                && self.level_range.is_none_or(|r| (a.level() - my_level).abs() <= r as f32)
        })?;
        let d = target.chebyshev();
        let style = Style::ALL
            .into_iter()
            .filter(|s| d <= self.ranges[s.index()])
            .max_by_key(|s| (self.damage[s.index()], std::cmp::Reverse(s.index())))?;
        Some(Attack { style, target: Target::Agent(target.id) })
    }
}

/// One action per living agent, in ascending id order.
pub fn scripted_actions(
    state: &WorldState,
    policy: &mut ScriptedPolicy,
) -> Result<BTreeMap<AgentId, ActionBundle>, ScriptError> {
    policy.retain_agents(|id| state.agents.contains_key(&id));
    state.agents.keys().map(|&id| Ok((id, policy.act(&observe(state, id)?)?))).collect()
}

/// Moves whose destination is safe to stand on; Stay is always included.
fn safe_moves(obs: &Observation) -> Vec<Move> {
    Move::ALL
        .into_iter()
        .filter(|m| {
            let (dr, dc) = m.delta();
            *m == Move::Stay || obs.tile_at(dr, dc).is_some_and(|t| t.terrain().walkable())
        })
        .collect()
}

/// First move of a shortest safe path inside the crop to a tile satisfying `goal`.
/// Stay when already there; None when no such tile is reachable.
fn first_step(obs: &Observation, goal: impl Fn(i32, i32) -> bool) -> Option<Move> {
    let crop = obs.crop() as i32;
    let r = crop / 2;
    if goal(0, 0) {
        return Some(Move::Stay);
    }
    let idx = |dr: i32, dc: i32| ((dr + r) * crop + dc + r) as usize;
    let mut seen = vec![false; (crop * crop) as usize];
    seen[idx(0, 0)] = true;
    let mut queue = std::collections::VecDeque::from([(0, 0, Move::Stay)]);
    while let Some((dr, dc, via)) = queue.pop_front() {
        for mv in [Move::North, Move::South, Move::East, Move::West] {
            let (a, b) = mv.delta();
            let (nr, nc) = (dr + a, dc + b);
            if nr.abs() > r || nc.abs() > r || seen[idx(nr, nc)] {
                continue;
            }
            seen[idx(nr, nc)] = true;
            if !obs.tile_at(nr, nc).is_some_and(|t| t.terrain().walkable()) {
                continue;
            }
            let start = if via == Move::Stay { mv } else { via };
            if goal(nr, nc) {
                return Some(start);
            }
            queue.push_back((nr, nc, start));
        }
    }
    None
}
