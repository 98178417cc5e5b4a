//! Binary layout (all little-endian):
//!
//! ```text
//! header  u32 total_len | u8 version | u16 n_tiles | u16 n_agents
//! tile    i16 x 4                                   (8 bytes each)
//! agent   u32 id | i16 x 6 | f32 x 4                (32 bytes each)
//! ```
//!
//! `total_len` counts every byte including the header.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentEntity, Observation, Schema, TileEntity, AGENT_CONTINUOUS, AGENT_DISCRETE, TILE_ATTRS};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 9;
pub const TILE_RECORD_BYTES: usize = 2 * TILE_ATTRS;
pub const AGENT_RECORD_BYTES: usize = 4 + 2 * AGENT_DISCRETE + 4 * AGENT_CONTINUOUS;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("schema version {0} is not supported")]
    Version(u8),
    #[error("{what} count {count} exceeds limit {limit}")]
    Count { what: &'static str, count: usize, limit: usize },
    #[error("observation has no observer entity")]
    NoObserver,
    #[error("length prefix {prefix} disagrees with counts ({expected})")]
    Length { prefix: usize, expected: usize },
}

/// An encoded observation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WireObservation(pub Vec<u8>);

impl WireObservation {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn decode(&self, schema: &Schema) -> Result<Observation, WireError> {
        decode(&self.0, schema)
    }
}

pub fn encoded_len(n_tiles: usize, n_agents: usize) -> usize {
    HEADER_BYTES + n_tiles * TILE_RECORD_BYTES + n_agents * AGENT_RECORD_BYTES
}

pub fn encode(obs: &Observation) -> WireObservation {
    let len = encoded_len(obs.tiles.len(), obs.agents.len());
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(WIRE_VERSION);
    out.extend_from_slice(&(obs.tiles.len() as u16).to_le_bytes());
    out.extend_from_slice(&(obs.agents.len() as u16).to_le_bytes());
    for t in &obs.tiles {
        for v in t.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for a in &obs.agents {
        out.extend_from_slice(&a.id.to_le_bytes());
        for v in a.discrete {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in a.continuous {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    WireObservation(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.at..self.at + N].try_into().expect("length checked up front");
        self.at += N;
        out
    }
    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.take())
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

pub fn decode(bytes: &[u8], schema: &Schema) -> Result<Observation, WireError> {
    if bytes.len() < HEADER_BYTES {
        return Err(WireError::Truncated { needed: HEADER_BYTES, have: bytes.len() });
    }
    let mut rd = Reader { buf: bytes, at: 0 };
    let prefix = rd.u32() as usize;
    let version = rd.take::<1>()[0];
    if version != WIRE_VERSION {
        return Err(WireError::Version(version));
    }
    let n_tiles = rd.u16() as usize;
    let n_agents = rd.u16() as usize;
    if n_tiles > schema.n_tiles() {
        return Err(WireError::Count { what: "tile", count: n_tiles, limit: schema.n_tiles() });
    }
    if n_agents > schema.agent_cap {
        return Err(WireError::Count { what: "agent", count: n_agents, limit: schema.agent_cap });
    }
    if n_agents == 0 {
        return Err(WireError::NoObserver);
    }
    let expected = encoded_len(n_tiles, n_agents);
    if prefix != expected {
        return Err(WireError::Length { prefix, expected });
    }
    if bytes.len() < expected {
        return Err(WireError::Truncated { needed: expected, have: bytes.len() });
    }
    let tiles = (0..n_tiles).map(|_| TileEntity(std::array::from_fn(|_| rd.i16()))).collect();
    let agents = (0..n_agents)
        .map(|_| {
            let id = rd.u32();
            let discrete = std::array::from_fn(|_| rd.i16());
            let continuous = std::array::from_fn(|_| rd.f32());
            AgentEntity { id, discrete, continuous }
        })
        .collect();
    Ok(Observation { tiles, agents })
}
