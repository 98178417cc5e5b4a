//! Typed run configuration and named deterministic RNG streams.
//!
//! A [`Config`] is immutable once loaded. JSON files override individual keys;
//! everything unspecified keeps its default. Every consumer of randomness asks
//! for its own [`RngStream`] so that, for instance, changing how actions are
//! sampled never perturbs where agents spawn.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown rng stream `{0}`")]
    UnknownStream(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpawnRegion {
    /// The ring of tiles just inside the lava border.
    Border,
    /// An 8x8 block at the middle of the map.
    Center,
}

/// Which agents may be attacked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackRule {
    /// Agents younger than this many ticks cannot be targeted.
    SpawnSafety(u64),
    /// Only agents within this many overall levels of the attacker can be targeted.
    LevelRange(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TileAggregation {
    /// Two stride-2 3x3 convolutions over the tile crop.
    Conv,
    /// Mean of tile entity embeddings.
    MeanPool,
}

/// Per-style numbers for melee, range and mage attacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTable<T> {
    pub melee: T,
    pub range: T,
    pub mage: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombatConfig {
    /// Chebyshev reach in tiles.
    pub ranges: StyleTable<u32>,
    pub base_damage: StyleTable<u32>,
    /// Every this many style levels adds one damage point.
    pub damage_level_divisor: u32,
    pub freeze_ticks: u64,
    pub accuracy_base: f64,
    pub accuracy_slope: f64,
    pub accuracy_floor: f64,
    pub accuracy_ceiling: f64,
}

impl Default for CombatConfig {
    fn default() -> Self {
        Self {
            ranges: StyleTable { melee: 1, range: 3, mage: 4 },
            base_damage: StyleTable { melee: 3, range: 2, mage: 1 },
            damage_level_divisor: 5,
            freeze_ticks: 3,
            accuracy_base: 0.5,
            accuracy_slope: 0.05,
            accuracy_floor: 0.1,
            accuracy_ceiling: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgressionConfig {
    pub forage_xp: f64,
    /// Experience per point of damage dealt (attacker) or absorbed (defender).
    pub combat_xp_per_damage: f64,
}

impl Default for ProgressionConfig {
    fn default() -> Self {
        Self { forage_xp: 10.0, combat_xp_per_damage: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub octaves: u32,
    /// Tiles per noise feature at the base octave.
    pub scale: f64,
    pub water: f64,
    pub forest_lo: f64,
    pub forest_hi: f64,
    pub stone: f64,
    /// Shift thresholds with distance from the center: open and sparse in the
    /// middle, mazelike and resource rich toward the border.
    pub radial_difficulty: bool,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            scale: 16.0,
            water: 0.25,
            forest_lo: 0.55,
            forest_hi: 0.75,
            stone: 0.85,
            radial_difficulty: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub map_width: usize,
    pub map_height: usize,
    pub border_thickness: usize,
    /// Width of the all-grass ring kept just inside the lava.
    pub spawn_margin: usize,
    pub terrain: TerrainConfig,

    pub spawn_cap: usize,
    pub spawn_region: SpawnRegion,
    pub food_max: u32,
    pub water_max: u32,
    pub health_max: u32,
    pub starvation_rate: u32,
    pub regen_rate: u32,
    pub forest_regen_ticks: u32,
    pub forage_food: u32,
    pub forage_water: u32,
    pub combat: CombatConfig,
    pub progression: ProgressionConfig,
    pub attack_rule: AttackRule,
    pub xp_scale: f64,

    pub n_populations: usize,
    pub obs_crop: usize,
    pub obs_agent_cap: usize,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_channels: usize,
    pub tile_aggregation: TileAggregation,

    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_actions: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            map_width: 64,
            map_height: 64,
            border_thickness: 8,
            spawn_margin: 2,
            terrain: TerrainConfig::default(),
            spawn_cap: 128,
            spawn_region: SpawnRegion::Border,
            food_max: 10,
            water_max: 10,
            health_max: 10,
            starvation_rate: 1,
            regen_rate: 1,
            forest_regen_ticks: 15,
            forage_food: 5,
            forage_water: 5,
            combat: CombatConfig::default(),
            progression: ProgressionConfig::default(),
            attack_rule: AttackRule::SpawnSafety(15),
            xp_scale: 1.0,
            n_populations: 8,
            obs_crop: 15,
            obs_agent_cap: 32,
            embed_dim: 32,
            hidden_dim: 64,
            conv_channels: 16,
            tile_aggregation: TileAggregation::Conv,
            gamma: 0.95,
            lr: 3e-4,
            weight_decay: 1e-5,
            grad_clip: 5.0,
            batch_actions: 16384,
            value_coef: 0.5,
            entropy_coef: 0.0,
            seed: 0,
        }
    }
}

pub fn default_config() -> Config {
    Config::default()
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.spawn_cap < 1 {
            return fail("spawn_cap must be >= 1");
        }
        if self.obs_crop % 2 == 0 {
            return fail("obs_crop must be odd");
        }
        if self.tile_aggregation == TileAggregation::Conv && self.obs_crop < 7 {
            return fail("obs_crop must be >= 7 for the convolution stack");
        }
        if self.food_max < 1 || self.water_max < 1 || self.health_max < 1 {
            return fail("food_max, water_max and health_max must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must be in (0,1)");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.conv_channels == 0 {
            return fail("embed_dim, hidden_dim and conv_channels must be > 0");
        }
        if self.map_width < self.obs_crop || self.map_height < self.obs_crop {
            return fail("map_width and map_height must be >= obs_crop");
        }
        if self.border_thickness < 1 {
            return fail("border_thickness must be >= 1");
        }
        if 2 * self.spawn_margin >= self.map_width.min(self.map_height) {
            return fail("spawn_margin leaves no interior");
        }
        if self.n_populations < 1 || self.n_populations > i16::MAX as usize {
            return fail("n_populations must be in [1, 32767]");
        }
        if self.obs_agent_cap < 1 {
            return fail("obs_agent_cap must be >= 1");
        }
        if self.batch_actions < 1 {
            return fail("batch_actions must be >= 1");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return fail("lr and grad_clip must be > 0, weight_decay >= 0");
        }
        if self.xp_scale < 0.0 {
            return fail("xp_scale must be >= 0");
        }
        let t = &self.terrain;
        if !(t.water < t.forest_lo && t.forest_lo < t.forest_hi && t.forest_hi < t.stone) {
            return fail("terrain thresholds must satisfy water < forest_lo < forest_hi < stone");
        }
        if t.octaves < 1 || !(t.scale > 0.0) {
            return fail("terrain octaves must be >= 1 and scale > 0");
        }
        let c = &self.combat;
        if c.ranges.melee < 1 || c.ranges.range < 1 || c.ranges.mage < 1 {
            return fail("combat ranges must be >= 1");
        }
        if !(0.0 <= c.accuracy_floor && c.accuracy_floor < c.accuracy_ceiling && c.accuracy_ceiling <= 1.0) {
            return fail("combat accuracy must satisfy 0 <= floor < ceiling <= 1");
        }
        if c.damage_level_divisor < 1 {
            return fail("combat damage_level_divisor must be >= 1");
        }
        if !(self.progression.forage_xp >= 0.0 && self.progression.combat_xp_per_damage >= 0.0) {
            return fail("progression experience awards must be >= 0");
        }
        Ok(())
    }

    /// Full map side lengths including the lava border.
    pub fn total_width(&self) -> usize {
        self.map_width + 2 * self.border_thickness
    }

    pub fn total_height(&self) -> usize {
        self.map_height + 2 * self.border_thickness
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a JSON object of overrides on top of `self`.
    pub fn with_overrides(&self, overrides: serde_json::Value) -> Result<Config, ConfigError> {
        let serde_json::Value::Object(_) = &overrides else {
            return Err(ConfigError::Syntax("top level must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, overrides);
        let cfg: Config = serde_path_to_error::deserialize(base).map_err(|e| ConfigError::Key {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Config, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        Config::default().with_overrides(value)
    }

    /// Stable short hash of the serialized config.
    pub fn hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

// Objects merge key by key; everything else replaces.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !is_variant_switch(slot, &v) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Externally tagged enums serialize as one-key objects; naming a different
/// variant replaces the value instead of merging into it.
fn is_variant_switch(base: &serde_json::Value, over: &serde_json::Value) -> bool {
    match (base.as_object(), over.as_object()) {
        (Some(b), Some(o)) => b.len() == 1 && o.len() == 1 && b.keys().ne(o.keys()),
        _ => false,
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    Config::from_json_str(&text)
}

/// The independent randomness consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamName {
    MapGen,
    Spawning,
    Combat,
    PolicySampling,
    Init,
}

impl StreamName {
    pub const ALL: [StreamName; 5] = [
        StreamName::MapGen,
        StreamName::Spawning,
        StreamName::Combat,
        StreamName::PolicySampling,
        StreamName::Init,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StreamName::MapGen => "map_gen",
            StreamName::Spawning => "spawning",
            StreamName::Combat => "combat",
            StreamName::PolicySampling => "policy_sampling",
            StreamName::Init => "init",
        }
    }

    fn id(self) -> u64 {
        match self {
            StreamName::MapGen => 1,
            StreamName::Spawning => 2,
            StreamName::Combat => 3,
            StreamName::PolicySampling => 4,
            StreamName::Init => 5,
        }
    }
}

impl fmt::Display for StreamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StreamName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownStream(s.to_string()))
    }
}

/// A seeded generator dedicated to one consumer.
///
/// Streams with the same seed but different names run on distinct ChaCha
/// stream ids, so their outputs never overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    name: StreamName,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, name: StreamName) -> Self {
        Self::with_lane(seed, name, 0)
    }

    /// A further split of a named stream, e.g. one per worker.
    pub fn with_lane(seed: u64, name: StreamName, lane: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name.id() | (lane << 8));
        Self { name, rng }
    }

    pub fn name(&self) -> StreamName {
        self.name
    }

    /// How many 32-bit words have been drawn; identifies the stream position.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform draw in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, n); `n` must be non-zero.
    pub fn index(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.rng.gen_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Looks a stream up by its string name.
pub fn seed_rng(seed: u64, stream: &str) -> Result<RngStream, ConfigError> {
    Ok(RngStream::new(seed, stream.parse()?))
}
