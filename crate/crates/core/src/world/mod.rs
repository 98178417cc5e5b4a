//! The tile map: terrain, forest regrowth, and procedural generation.

mod gen;
mod noise;

pub use gen::{classify_tile, generate_map, Thresholds};
pub use noise::{ridge_noise, Perlin, RidgeFractal};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("position ({row}, {col}) is outside the {width}x{height} map")]
    OutOfBounds { row: i32, col: i32, width: usize, height: usize },
    #[error("terrain thresholds must satisfy water < forest_lo < forest_hi < stone")]
    UnorderedThresholds,
    #[error("map generation failed after {attempts} attempts: {diagnostics}")]
    GenerationFailed { attempts: usize, diagnostics: String },
    #[error("malformed map text: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Terrain {
    Grass = 0,
    Forest = 1,
    /// Consumed forest waiting to regrow.
    Scrub = 2,
    Stone = 3,
    Water = 4,
    Lava = 5,
}

impl Terrain {
    pub const ALL: [Terrain; 6] =
        [Terrain::Grass, Terrain::Forest, Terrain::Scrub, Terrain::Stone, Terrain::Water, Terrain::Lava];

    pub fn code(self) -> i16 {
        self as u8 as i16
    }

    pub fn from_code(code: i16) -> Option<Terrain> {
        Terrain::ALL.get(usize::try_from(code).ok()?).copied()
    }

    /// Lava can be entered; stepping in is fatal.
    pub fn passable(self) -> bool {
        matches!(self, Terrain::Grass | Terrain::Forest | Terrain::Scrub | Terrain::Lava)
    }

    pub fn lethal(self) -> bool {
        self == Terrain::Lava
    }

    /// Safe to stand on.
    pub fn walkable(self) -> bool {
        self.passable() && !self.lethal()
    }

    pub fn symbol(self) -> char {
        match self {
            Terrain::Grass => 'G',
            Terrain::Forest => 'F',
            Terrain::Scrub => 'S',
            Terrain::Stone => 'R',
            Terrain::Water => 'W',
            Terrain::Lava => 'L',
        }
    }

    pub fn from_symbol(c: char) -> Option<Terrain> {
        Terrain::ALL.into_iter().find(|t| t.symbol() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub terrain: Terrain,
    /// Ticks until a Scrub tile regrows; zero for every other terrain.
    pub regen_counter: u32,
}

impl Tile {
    pub const fn new(terrain: Terrain) -> Self {
        Self { terrain, regen_counter: 0 }
    }
}

/// Tile coordinates; rows grow southward, columns eastward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: i32,
    pub col: i32,
}

impl Pos {
    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn offset(self, dr: i32, dc: i32) -> Pos {
        Pos::new(self.row + dr, self.col + dc)
    }

    pub fn chebyshev(self, other: Pos) -> u32 {
        (self.row - other.row).unsigned_abs().max((self.col - other.col).unsigned_abs())
    }

    pub fn manhattan(self, other: Pos) -> u32 {
        (self.row - other.row).unsigned_abs() + (self.col - other.col).unsigned_abs()
    }

    pub fn neighbors4(self) -> [Pos; 4] {
        [self.offset(-1, 0), self.offset(1, 0), self.offset(0, 1), self.offset(0, -1)]
    }
}

/// Row-major grid of tiles, lava border included.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileMap {
    width: usize,
    height: usize,
    tiles: Vec<Tile>,
}

impl TileMap {
    pub fn filled(width: usize, height: usize, terrain: Terrain) -> Self {
        Self { width, height, tiles: vec![Tile::new(terrain); width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn in_bounds(&self, pos: Pos) -> bool {
        pos.row >= 0 && pos.col >= 0 && (pos.row as usize) < self.height && (pos.col as usize) < self.width
    }

    fn index(&self, pos: Pos) -> Result<usize, WorldError> {
        if self.in_bounds(pos) {
            Ok(pos.row as usize * self.width + pos.col as usize)
        } else {
            Err(WorldError::OutOfBounds { row: pos.row, col: pos.col, width: self.width, height: self.height })
        }
    }

    pub fn tile(&self, pos: Pos) -> Result<Tile, WorldError> {
        Ok(self.tiles[self.index(pos)?])
    }

    pub fn terrain(&self, pos: Pos) -> Result<Terrain, WorldError> {
        Ok(self.tile(pos)?.terrain)
    }

    /// Terrain with everything outside the map reported as lava.
    pub fn terrain_or_lava(&self, pos: Pos) -> Terrain {
        self.terrain(pos).unwrap_or(Terrain::Lava)
    }

    pub fn set_terrain(&mut self, pos: Pos, terrain: Terrain) -> Result<(), WorldError> {
        let i = self.index(pos)?;
        self.tiles[i] = Tile::new(terrain);
        Ok(())
    }

    pub fn passable(&self, pos: Pos) -> Result<bool, WorldError> {
        Ok(self.terrain(pos)?.passable())
    }

    pub fn is_lethal(&self, pos: Pos) -> Result<bool, WorldError> {
        Ok(self.terrain(pos)?.lethal())
    }

    /// Harvests a forest tile, turning it to scrub for `regen_ticks` ticks.
    pub fn consume_forest(&mut self, pos: Pos, regen_ticks: u32) -> Result<bool, WorldError> {
        let i = self.index(pos)?;
        let tile = &mut self.tiles[i];
        if tile.terrain != Terrain::Forest {
            return Ok(false);
        }
        if regen_ticks == 0 {
            return Ok(true);
        }
        *tile = Tile { terrain: Terrain::Scrub, regen_counter: regen_ticks };
        Ok(true)
    }

    /// Advances scrub regrowth by one tick.
    pub fn tick_tiles(&mut self) {
        for tile in self.tiles.iter_mut().filter(|t| t.terrain == Terrain::Scrub) {
            tile.regen_counter = tile.regen_counter.saturating_sub(1);
            if tile.regen_counter == 0 {
                tile.terrain = Terrain::Forest;
            }
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.height as i32).flat_map(move |r| (0..self.width as i32).map(move |c| Pos::new(r, c)))
    }

    pub fn count(&self, terrain: Terrain) -> usize {
        self.tiles.iter().filter(|t| t.terrain == terrain).count()
    }

    /// `width height` header, then one character per tile, one row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.width, self.height);
        for row in self.tiles.chunks(self.width) {
            out.extend(row.iter().map(|t| t.terrain.symbol()));
            out.push('\n');
        }
        out
    }

    /// Parses [`TileMap::to_text`] output. Scrub tiles restart with `scrub_regen` ticks.
    pub fn from_text(text: &str, scrub_regen: u32) -> Result<TileMap, WorldError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| WorldError::Parse("missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| WorldError::Parse(format!("bad header `{header}`"))))
            .collect::<Result<_, _>>()?;
        let [width, height] = dims[..] else {
            return Err(WorldError::Parse(format!("bad header `{header}`")));
        };
        let mut tiles = Vec::with_capacity(width * height);
        for r in 0..height {
            let line = lines.next().ok_or_else(|| WorldError::Parse(format!("missing row {r}")))?;
            if line.chars().count() != width {
                return Err(WorldError::Parse(format!("row {r} has wrong length")));
            }
            for ch in line.chars() {
                let terrain = Terrain::from_symbol(ch)
                    .ok_or_else(|| WorldError::Parse(format!("unknown tile symbol `{ch}`")))?;
                let regen_counter = if terrain == Terrain::Scrub { scrub_regen.max(1) } else { 0 };
                tiles.push(Tile { terrain, regen_counter });
            }
        }
        Ok(TileMap { width, height, tiles })
    }
}
