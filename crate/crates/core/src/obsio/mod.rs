//! Observation schema, extraction from world state, and the wire codec.

mod wire;

pub use wire::{decode, encode, WireError, WireObservation, AGENT_RECORD_BYTES, HEADER_BYTES, TILE_RECORD_BYTES, WIRE_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentId;
use crate::config::Config;
use crate::engine::WorldState;
use crate::world::{Pos, Terrain};

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("agent {0} is not alive")]
    UnknownAgent(AgentId),
    #[error("attribute {name} value {value} outside [{min}, {max}]")]
    OutOfRange { name: &'static str, value: i64, min: i16, max: i16 },
    #[error("malformed observation: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttributeKind {
    Discrete { min: i16, max: i16 },
    Continuous { mean: f32, std: f32 },
}

impl AttributeKind {
    /// Number of embedding rows a discrete attribute needs.
    pub fn cardinality(&self) -> Option<usize> {
        match *self {
            AttributeKind::Discrete { min, max } => Some((max as i32 - min as i32 + 1) as usize),
            AttributeKind::Continuous { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttributeSpec {
    pub name: &'static str,
    pub kind: AttributeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Tile,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntitySchema {
    pub entity: EntityType,
    pub attributes: Vec<AttributeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schema {
    pub tile: EntitySchema,
    pub agent: EntitySchema,
    pub crop: usize,
    pub agent_cap: usize,
}

impl Schema {
    pub fn n_tiles(&self) -> usize {
        self.crop * self.crop
    }

    pub fn radius(&self) -> i16 {
        (self.crop / 2) as i16
    }

    pub fn entity(&self, e: EntityType) -> &EntitySchema {
        match e {
            EntityType::Tile => &self.tile,
            EntityType::Agent => &self.agent,
        }
    }
}

pub const TILE_ATTRS: usize = 4;
pub const AGENT_DISCRETE: usize = 6;
pub const AGENT_CONTINUOUS: usize = 4;
pub const AGENT_ATTRS: usize = AGENT_DISCRETE + AGENT_CONTINUOUS;

pub fn build_schema(cfg: &Config) -> Schema {
    let r = (cfg.obs_crop / 2) as i16;
    let d = |name, min, max| AttributeSpec { name, kind: AttributeKind::Discrete { min, max } };
    let c = |name, max: u32| AttributeSpec {
        name,
        kind: AttributeKind::Continuous { mean: max as f32 / 2.0, std: max as f32 / 4.0 },
    };
    let tile = EntitySchema {
        entity: EntityType::Tile,
        attributes: vec![d("terrain", 0, 5), d("has_forest_food", 0, 1), d("d_row", -r, r), d("d_col", -r, r)],
    };
    let agent = EntitySchema {
        entity: EntityType::Agent,
        attributes: vec![
            d("d_row", -r, r),
            d("d_col", -r, r),
            d("frozen", 0, 1),
            d("is_self", 0, 1),
            d("population", 0, cfg.n_populations as i16 - 1),
            d("same_population", 0, 1),
            c("food", cfg.food_max),
            c("water", cfg.water_max),
            c("health", cfg.health_max),
            AttributeSpec { name: "level", kind: AttributeKind::Continuous { mean: 5.0, std: 5.0 } },
        ],
    };
    Schema { tile, agent, crop: cfg.obs_crop, agent_cap: cfg.obs_agent_cap }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttrValue {
    Discrete(i16),
    Continuous(f32),
}

pub fn normalize(value: AttrValue, spec: &AttributeSpec) -> Result<f32, ObsError> {
    match (value, spec.kind) {
        (AttrValue::Continuous(x), AttributeKind::Continuous { mean, std }) => Ok((x - mean) / std),
        (AttrValue::Discrete(x), AttributeKind::Discrete { min, max }) => {
            if x < min || x > max {
                Err(ObsError::OutOfRange { name: spec.name, value: x as i64, min, max })
            } else {
                Ok(x as f32)
            }
        }
        _ => Err(ObsError::Malformed(format!("attribute {} has the wrong kind", spec.name))),
    }
}

/// Tile attributes in schema order: terrain, has_forest_food, d_row, d_col.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileEntity(pub [i16; TILE_ATTRS]);

impl TileEntity {
    pub fn terrain(&self) -> Terrain {
        Terrain::from_code(self.0[0]).unwrap_or(Terrain::Lava)
    }
    pub fn d_row(&self) -> i16 {
        self.0[2]
    }
    pub fn d_col(&self) -> i16 {
        self.0[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentEntity {
    pub id: AgentId,
    /// d_row, d_col, frozen, is_self, population, same_population.
    pub discrete: [i16; AGENT_DISCRETE],
    /// food, water, health, level.
    pub continuous: [f32; AGENT_CONTINUOUS],
}

impl AgentEntity {
    pub fn d_row(&self) -> i16 {
        self.discrete[0]
    }
    pub fn d_col(&self) -> i16 {
        self.discrete[1]
    }
    pub fn is_self(&self) -> bool {
        self.discrete[3] == 1
    }
    pub fn population(&self) -> usize {
        self.discrete[4] as usize
    }
    pub fn level(&self) -> f32 {
        self.continuous[3]
    }
    pub fn chebyshev(&self) -> u32 {
        self.d_row().unsigned_abs().max(self.d_col().unsigned_abs()) as u32
    }

    pub fn attributes(&self) -> Vec<AttrValue> {
        self.discrete
            .iter()
            .map(|&v| AttrValue::Discrete(v))
            .chain(self.continuous.iter().map(|&v| AttrValue::Continuous(v)))
            .collect()
    }
}

/// What one agent sees: a square tile crop and nearby agents, observer first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tiles: Vec<TileEntity>,
    pub agents: Vec<AgentEntity>,
}

impl Observation {
    pub fn observer(&self) -> &AgentEntity {
        &self.agents[0]
    }

    pub fn observer_id(&self) -> AgentId {
        self.agents[0].id
    }

    pub fn crop(&self) -> usize {
        (self.tiles.len() as f64).sqrt() as usize
    }

    /// Tile at an offset from the observer, if inside the crop.
    pub fn tile_at(&self, d_row: i32, d_col: i32) -> Option<&TileEntity> {
        let crop = self.crop() as i32;
        let r = crop / 2;
        if d_row.abs() > r || d_col.abs() > r {
            return None;
        }
        self.tiles.get(((d_row + r) * crop + d_col + r) as usize)
    }

    /// Schema conformance: counts, observer flag, discrete ranges.
    pub fn validate(&self, schema: &Schema) -> Result<(), ObsError> {
        if self.tiles.len() != schema.n_tiles() {
            return Err(ObsError::Malformed(format!("{} tiles, expected {}", self.tiles.len(), schema.n_tiles())));
        }
        if self.agents.is_empty() || self.agents.len() > schema.agent_cap {
            return Err(ObsError::Malformed(format!("{} agent entities", self.agents.len())));
        }
        if !self.agents[0].is_self() || self.agents[1..].iter().any(AgentEntity::is_self) {
            return Err(ObsError::Malformed("observer must be first and unique".into()));
        }
        for t in &self.tiles {
            for (v, spec) in t.0.iter().zip(&schema.tile.attributes) {
                normalize(AttrValue::Discrete(*v), spec)?;
            }
        }
        for a in &self.agents {
            for (v, spec) in a.attributes().into_iter().zip(&schema.agent.attributes) {
                normalize(v, spec)?;
            }
        }
        Ok(())
    }
}

/// Extracts `agent_id`'s observation from the current state.
pub fn observe(state: &WorldState, agent_id: AgentId) -> Result<Observation, ObsError> {
    let cfg = &state.config;
    let me = state.agents.get(&agent_id).ok_or(ObsError::UnknownAgent(agent_id))?;
    let r = (cfg.obs_crop / 2) as i32;
    let mut tiles = Vec::with_capacity(cfg.obs_crop * cfg.obs_crop);
    for dr in -r..=r {
        for dc in -r..=r {
            let terrain = state.map.terrain_or_lava(me.pos.offset(dr, dc));
            tiles.push(TileEntity([terrain.code(), (terrain == Terrain::Forest) as i16, dr as i16, dc as i16]));
        }
    }
    let mut others: Vec<(u32, AgentId)> = state
        .agents
        .values()
        .filter(|a| a.id != agent_id && a.pos.chebyshev(me.pos) <= r as u32)
        .map(|a| (a.pos.chebyshev(me.pos), a.id))
        .collect();
    others.sort_unstable();
    others.truncate(cfg.obs_agent_cap.saturating_sub(1));
    let entity = |id: AgentId| {
        let a = &state.agents[&id];
        let d: Pos = Pos::new(a.pos.row - me.pos.row, a.pos.col - me.pos.col);
        AgentEntity {
            id,
            discrete: [
                d.row as i16,
                d.col as i16,
                a.is_frozen(state.tick) as i16,
                (id == agent_id) as i16,
                a.population as i16,
                (a.population == me.population) as i16,
            ],
            continuous: [a.food as f32, a.water as f32, a.health as f32, a.level() as f32],
        }
    };
    let agents = std::iter::once(agent_id).chain(others.into_iter().map(|(_, id)| id)).map(entity).collect();
    Ok(Observation { tiles, agents })
}
