//! The per-tick state transition.

mod combat;
mod phases;

pub use combat::{attackable, damage, hit_chance, style_skill};
pub use phases::{forage_step, resolve_move, spawn_tiles, survival_step};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentId, AgentState};
use crate::config::{Config, RngStream, StreamName, StyleTable};
use crate::world::{generate_map, Pos, TileMap, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    North,
    South,
    East,
    West,
    Stay,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::North, Move::South, Move::East, Move::West, Move::Stay];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Move::North => (-1, 0),
            Move::South => (1, 0),
            Move::East => (0, 1),
            Move::West => (0, -1),
            Move::Stay => (0, 0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    Melee,
    Range,
    Mage,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Melee, Style::Range, Style::Mage];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl<T: Copy> StyleTable<T> {
    pub fn get(&self, style: Style) -> T {
        match style {
            Style::Melee => self.melee,
            Style::Range => self.range,
            Style::Mage => self.mage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Explicitly choosing not to attack.
    Null,
    Agent(AgentId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attack {
    pub style: Style,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionBundle {
    pub mv: Move,
    pub attack: Option<Attack>,
}

impl ActionBundle {
    pub const IDLE: ActionBundle = ActionBundle { mv: Move::Stay, attack: None };

    pub fn moving(mv: Move) -> Self {
        Self { mv, attack: None }
    }

    pub fn attack_target(&self) -> Option<(Style, AgentId)> {
        match self.attack {
            Some(Attack { style, target: Target::Agent(id) }) => Some((style, id)),
            _ => None,
        }
    }
}

impl Default for ActionBundle {
    fn default() -> Self {
        Self::IDLE
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ActionError {
    #[error("agent {0} is not alive")]
    DeadActor(AgentId),
    #[error("agent {0} cannot target itself")]
    SelfTarget(AgentId),
    #[error("target {0} is not a living agent")]
    UnknownTarget(AgentId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathCause {
    Starvation,
    Combat,
    Lava,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpawnEvent {
    pub agent: AgentId,
    pub population: usize,
    pub pos: Pos,
    pub food: u32,
    pub water: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveEvent {
    pub agent: AgentId,
    pub from: Pos,
    pub to: Pos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitEvent {
    pub attacker: AgentId,
    pub defender: AgentId,
    pub style: Style,
    pub damage: u32,
    pub froze: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissEvent {
    pub attacker: AgentId,
    pub defender: AgentId,
    pub style: Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForageEvent {
    pub agent: AgentId,
    pub food: u32,
    pub water: u32,
    pub consumed_forest: bool,
}

/// Resources burned by hunger and thirst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpkeepEvent {
    pub agent: AgentId,
    pub food: u32,
    pub water: u32,
    pub health_delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeathEvent {
    pub agent: AgentId,
    pub population: usize,
    pub cause: DeathCause,
    pub killer: Option<AgentId>,
    pub pos: Pos,
    /// Holdings at the moment of death.
    pub food: u32,
    pub water: u32,
    pub spawn_tick: u64,
    pub lifetime: u64,
}

/// Transfer of a victim's holdings; whatever the killer cannot carry is discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilferEvent {
    pub from: AgentId,
    pub to: AgentId,
    pub food: u32,
    pub water: u32,
    pub food_discarded: u32,
    pub water_discarded: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickEvents {
    pub tick: u64,
    pub spawns: Vec<SpawnEvent>,
    pub moves: Vec<MoveEvent>,
    pub hits: Vec<HitEvent>,
    pub misses: Vec<MissEvent>,
    pub forages: Vec<ForageEvent>,
    pub upkeep: Vec<UpkeepEvent>,
    pub deaths: Vec<DeathEvent>,
    pub pilfers: Vec<PilferEvent>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub events: TickEvents,
    /// One entry per agent that was alive when the tick began.
    pub rewards: BTreeMap<AgentId, f64>,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub config: Arc<Config>,
    pub map: TileMap,
    pub agents: BTreeMap<AgentId, AgentState>,
    pub tick: u64,
    pub next_agent_id: AgentId,
    pub next_population: usize,
    pub(crate) spawn_rng: RngStream,
    pub(crate) combat_rng: RngStream,
}

impl WorldState {
    /// Generates the map from the `map_gen` stream of `cfg.seed`.
    pub fn new(cfg: Config) -> Result<Self, WorldError> {
        let map = generate_map(&cfg, &mut RngStream::new(cfg.seed, StreamName::MapGen))?;
        Ok(Self::with_map(cfg, map))
    }

    pub fn with_map(cfg: Config, map: TileMap) -> Self {
        let seed = cfg.seed;
        Self {
            config: Arc::new(cfg),
            map,
            agents: BTreeMap::new(),
            tick: 0,
            next_agent_id: 0,
            next_population: 0,
            spawn_rng: RngStream::new(seed, StreamName::Spawning),
            combat_rng: RngStream::new(seed, StreamName::Combat),
        }
    }

    pub fn living(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentState> {
        self.agents.get(&id)
    }

    /// Places an agent directly, bypassing the spawn phase. Used by tests and tools.
    pub fn insert_agent(&mut self, population: usize, pos: Pos) -> AgentId {
        let id = self.next_agent_id;
        self.next_agent_id += 1;
        self.agents.insert(id, AgentState::spawn(id, population, pos, self.tick, &self.config));
        id
    }

    /// Checks an action against the current state.
    pub fn validate_action(&self, actor: AgentId, action: &ActionBundle) -> Result<(), ActionError> {
        if !self.agents.contains_key(&actor) {
            return Err(ActionError::DeadActor(actor));
        }
        if let Some((_, target)) = action.attack_target() {
            if target == actor {
                return Err(ActionError::SelfTarget(actor));
            }
            if !self.agents.contains_key(&target) {
                return Err(ActionError::UnknownTarget(target));
            }
        }
        Ok(())
    }

    /// SHA-256 over the full state, including stream positions.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.config.hash().to_le_bytes());
        h.update(bincode::serialize(&self.map).expect("map serializes"));
        for agent in self.agents.values() {
            h.update(bincode::serialize(agent).expect("agent serializes"));
        }
        h.update(self.tick.to_le_bytes());
        h.update(self.next_agent_id.to_le_bytes());
        h.update((self.next_population as u64).to_le_bytes());
        h.update(self.spawn_rng.word_pos().to_le_bytes());
        h.update(self.combat_rng.word_pos().to_le_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Advances one tick. Agents without an entry in `actions` idle.
    pub fn step(&mut self, actions: &BTreeMap<AgentId, ActionBundle>) -> StepOutcome {
        let cfg = Arc::clone(&self.config);
        let tick = self.tick;
        let mut events = TickEvents { tick, ..TickEvents::default() };
        for id in actions.keys().filter(|id| !self.agents.contains_key(id)) {
            events.warnings.push(format!("action for unknown or dead agent {id} ignored"));
        }
        let acting: Vec<AgentId> = self.agents.keys().copied().collect();
        let action_of = |id: &AgentId| actions.get(id).copied().unwrap_or_default();

        // Freeze expiry needs no bookkeeping: frozen_until is absolute.

        for id in &acting {
            let agent = &self.agents[id];
            let to = resolve_move(&self.map, agent, action_of(id).mv, tick);
            if to != agent.pos {
                events.moves.push(MoveEvent { agent: *id, from: agent.pos, to });
                self.agents.get_mut(id).expect("acting agent").pos = to;
            }
        }

        let mut killers = BTreeMap::new();
        for id in &acting {
            let Some((style, target)) = action_of(id).attack_target() else { continue };
            if !self.agents.contains_key(&target) || target == *id {
                events.warnings.push(format!("agent {id} attacked invalid target {target}"));
                continue;
            }
            if attackable(self, *id, target, style) {
                combat::resolve_attack(self, *id, style, target, &mut killers, &mut events);
            }
        }

        for id in &acting {
            let agent = self.agents.get_mut(id).expect("acting agent");
            if agent.health == 0 {
                continue;
            }
            if let Some(ev) = forage_step(&mut self.map, agent, &cfg) {
                events.forages.push(ev);
            }
        }

        for id in &acting {
            let agent = self.agents.get_mut(id).expect("acting agent");
            if agent.health > 0 {
                events.upkeep.push(survival_step(agent, &cfg));
            }
        }

        let dying: Vec<(AgentId, DeathCause)> = acting
            .iter()
            .filter_map(|id| {
                let a = &self.agents[id];
                if self.map.terrain_or_lava(a.pos).lethal() {
                    Some((*id, DeathCause::Lava))
                } else if a.health == 0 && killers.contains_key(id) {
                    Some((*id, DeathCause::Combat))
                } else if a.health == 0 {
                    Some((*id, DeathCause::Starvation))
                } else {
                    None
                }
            })
            .collect();
        let mut removed = Vec::with_capacity(dying.len());
        for &(id, cause) in &dying {
            let mut victim = self.agents.remove(&id).expect("dying agent");
            victim.alive = false;
            let killer = if cause == DeathCause::Combat { killers.get(&id).copied() } else { None };
            events.deaths.push(DeathEvent {
                agent: id,
                population: victim.population,
                cause,
                killer,
                pos: victim.pos,
                food: victim.food,
                water: victim.water,
                spawn_tick: victim.spawn_tick,
                lifetime: tick - victim.spawn_tick,
            });
            removed.push((victim, killer));
        }
        for (victim, killer) in removed {
            let Some(killer) = killer else { continue };
            // a killer that died this tick cannot carry anything
            let (food, water) = match self.agents.get_mut(&killer) {
                Some(k) => {
                    let food = victim.food.min(k.food_cap(&cfg).saturating_sub(k.food));
                    let water = victim.water.min(k.water_cap(&cfg).saturating_sub(k.water));
                    k.food += food;
                    k.water += water;
                    (food, water)
                }
                None => (0, 0),
            };
            events.pilfers.push(PilferEvent {
                from: victim.id,
                to: killer,
                food,
                water,
                food_discarded: victim.food - food,
                water_discarded: victim.water - water,
            });
        }

        if self.agents.len() < cfg.spawn_cap {
            self.spawn_one(&mut events);
        }

        self.map.tick_tiles();
        self.tick += 1;

        let dead: std::collections::BTreeSet<AgentId> = dying.iter().map(|d| d.0).collect();
        let rewards = acting.iter().map(|id| (*id, if dead.contains(id) { -1.0 } else { 0.0 })).collect();
        StepOutcome { events, rewards }
    }

    fn spawn_one(&mut self, events: &mut TickEvents) {
        let tiles = spawn_tiles(&self.map, &self.config);
        assert!(!tiles.is_empty(), "spawn region has no walkable tile");
        let pos = tiles[self.spawn_rng.index(tiles.len())];
        let population = self.next_population;
        self.next_population = (self.next_population + 1) % self.config.n_populations.max(1);
        let id = self.insert_agent(population, pos);
        let a = &self.agents[&id];
        events.spawns.push(SpawnEvent { agent: id, population, pos, food: a.food, water: a.water });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;
    use crate::world::Terrain;

    fn arena(cfg: Config) -> WorldState {
        let (w, h) = (cfg.total_width(), cfg.total_height());
        let b = cfg.border_thickness;
        let mut map = TileMap::filled(w, h, Terrain::Lava);
        for r in b..h - b {
            for c in b..w - b {
                map.set_terrain(Pos::new(r as i32, c as i32), Terrain::Grass).unwrap();
            }
        }
        WorldState::with_map(cfg, map)
    }

    fn small_cfg() -> Config {
        let mut cfg = default_config();
        cfg.map_width = 12;
        cfg.map_height = 12;
        cfg.border_thickness = 2;
        cfg
    }

    #[test]
    fn stay_keeps_full_health() {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 1;
        let mut s = arena(cfg);
        let id = s.insert_agent(0, Pos::new(6, 6));
        let out = s.step(&BTreeMap::from([(id, ActionBundle::IDLE)]));
        assert_eq!(out.rewards[&id], 0.0);
        assert_eq!(s.agents[&id].health, 10);
        assert!(out.events.spawns.is_empty());
    }

    #[test]
    fn lava_kills_with_reward() {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 1;
        let mut s = arena(cfg);
        let id = s.insert_agent(0, Pos::new(2, 5));
        let out = s.step(&BTreeMap::from([(id, ActionBundle::moving(Move::North))]));
        assert_eq!(out.rewards[&id], -1.0);
        assert_eq!(out.events.deaths[0].cause, DeathCause::Lava);
        assert!(!s.agents.contains_key(&id));
    }

    #[test]
    fn empty_world_spawns_one_per_tick_round_robin() {
        let mut s = arena(small_cfg());
        let mut pops = Vec::new();
        for _ in 0..10 {
            let out = s.step(&BTreeMap::new());
            assert_eq!(out.events.spawns.len(), 1);
            pops.push(out.events.spawns[0].population);
        }
        assert_eq!(pops, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1]);
    }

    #[test]
    fn cap_blocks_spawn() {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 3;
        let mut s = arena(cfg);
        for _ in 0..3 {
            s.step(&BTreeMap::new());
        }
        assert_eq!(s.living(), 3);
        assert!(s.step(&BTreeMap::new()).events.spawns.is_empty());
    }

    #[test]
    fn unknown_actor_warns() {
        let mut s = arena(small_cfg());
        let out = s.step(&BTreeMap::from([(99, ActionBundle::IDLE)]));
        assert_eq!(out.events.warnings.len(), 1);
        assert!(!out.rewards.contains_key(&99));
    }

    #[test]
    fn attack_rules() {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 0;
        let mut s = arena(cfg.clone());
        let a = s.insert_agent(0, Pos::new(5, 5));
        s.tick = 3;
        let b = s.insert_agent(1, Pos::new(5, 6));
        s.tick = 6;
        assert!(!attackable(&s, a, b, Style::Melee));
        s.tick = 18;
        assert!(attackable(&s, a, b, Style::Melee));
        assert!(!attackable(&s, a, a, Style::Melee));

        cfg.attack_rule = crate::config::AttackRule::LevelRange(5);
        let mut s = arena(cfg);
        let a = s.insert_agent(0, Pos::new(5, 5));
        let b = s.insert_agent(1, Pos::new(5, 6));
        let c = s.insert_agent(1, Pos::new(5, 9));
        assert!(attackable(&s, a, b, Style::Melee));
        assert!(!attackable(&s, a, c, Style::Range));
        assert!(attackable(&s, a, c, Style::Mage));
        let xp = 64.0 * 100.0; // level 9
        for k in crate::agents::Skill::COMBAT {
            s.agents.get_mut(&b).unwrap().skills.set_xp(k, xp).unwrap();
        }
        assert_eq!(s.agents[&b].level(), 9);
        assert!(!attackable(&s, a, b, Style::Melee));
    }

    fn duel(style: Style, seed: u64) -> (WorldState, AgentId, AgentId, StepOutcome) {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 0;
        cfg.attack_rule = crate::config::AttackRule::SpawnSafety(0);
        cfg.seed = seed;
        let mut s = arena(cfg);
        let a = s.insert_agent(0, Pos::new(5, 5));
        let b = s.insert_agent(1, Pos::new(5, 6));
        let act = ActionBundle { mv: Move::Stay, attack: Some(Attack { style, target: Target::Agent(b) }) };
        let out = s.step(&BTreeMap::from([(a, act)]));
        (s, a, b, out)
    }

    #[test]
    fn mage_hit_freezes_three_ticks() {
        let (mut s, _, b, out) = (0..50).map(|seed| duel(Style::Mage, seed)).find(|d| !d.3.events.hits.is_empty()).unwrap();
        assert!(out.events.hits[0].froze);
        assert_eq!(s.agents[&b].health, 10 - 1 + 1);
        let start = s.agents[&b].pos;
        for _ in 0..3 {
            s.step(&BTreeMap::from([(b, ActionBundle::moving(Move::South))]));
            assert_eq!(s.agents[&b].pos, start);
        }
        s.step(&BTreeMap::from([(b, ActionBundle::moving(Move::South))]));
        assert_eq!(s.agents[&b].pos, start.offset(1, 0));
    }

    #[test]
    fn miss_changes_nothing_but_rng() {
        let (s, _, b, out) = (0..50).map(|seed| duel(Style::Melee, seed)).find(|d| !d.3.events.misses.is_empty()).unwrap();
        assert!(out.events.hits.is_empty());
        assert_eq!(s.agents[&b].health, 10);
        assert_eq!(s.agents[&b].skills, crate::agents::Skills::default());
    }

    #[test]
    fn combat_kill_pilfers() {
        let mut cfg = small_cfg();
        cfg.spawn_cap = 0;
        cfg.attack_rule = crate::config::AttackRule::SpawnSafety(0);
        cfg.combat.accuracy_floor = 0.99;
        cfg.combat.accuracy_ceiling = 1.0;
        let mut s = arena(cfg);
        let a = s.insert_agent(0, Pos::new(5, 5));
        let b = s.insert_agent(1, Pos::new(5, 6));
        {
            let k = s.agents.get_mut(&a).unwrap();
            k.food = 3;
            k.water = 9;
        }
        {
            let v = s.agents.get_mut(&b).unwrap();
            v.health = 2;
            v.food = 5;
            v.water = 3;
        }
        let act = ActionBundle { mv: Move::Stay, attack: Some(Attack { style: Style::Melee, target: Target::Agent(b) }) };
        let out = s.step(&BTreeMap::from([(a, act)]));
        let death = &out.events.deaths[0];
        // the slain skip upkeep
        assert_eq!((death.cause, death.killer, death.food, death.water), (DeathCause::Combat, Some(a), 5, 3));
        let p = &out.events.pilfers[0];
        // killer after upkeep: food 2, water 8; caps 10
        assert_eq!((p.food, p.water, p.food_discarded, p.water_discarded), (5, 2, 0, 1));
        assert_eq!((s.agents[&a].food, s.agents[&a].water), (7, 10));
        assert_eq!(out.rewards[&b], -1.0);
    }

    #[test]
    fn hash_tracks_state() {
        let mut s = arena(small_cfg());
        let h0 = s.hash();
        assert_eq!(h0, s.clone().hash());
        s.step(&BTreeMap::new());
        assert_ne!(h0, s.hash());
        assert_eq!(s.hash_hex().len(), 64);
    }
}
