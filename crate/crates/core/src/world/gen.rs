use crate::config::{Config, RngStream};

use super::noise::RidgeFractal;
use super::{Pos, Terrain, TileMap, WorldError};

const MAX_ATTEMPTS: usize = 100;

/// Cut points on the ridge value, in increasing order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    water: f64,
    forest_lo: f64,
    forest_hi: f64,
    stone: f64,
}

impl Thresholds {
    pub fn new(water: f64, forest_lo: f64, forest_hi: f64, stone: f64) -> Result<Self, WorldError> {
        if water < forest_lo && forest_lo < forest_hi && forest_hi < stone {
            Ok(Self { water, forest_lo, forest_hi, stone })
        } else {
            Err(WorldError::UnorderedThresholds)
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self, WorldError> {
        let t = &cfg.terrain;
        Self::new(t.water, t.forest_lo, t.forest_hi, t.stone)
    }

    /// Difficulty grading by normalized radius in [0, 1]: the center gets
    /// narrower forest bands and less stone, the rim more of both.
    fn graded(&self, radius: f64) -> Thresholds {
        let r = radius.clamp(0.0, 1.0);
        let band = self.forest_hi - self.forest_lo;
        let forest_hi = self.forest_lo + band * (0.4 + 0.6 * r);
        let stone_room = (1.0 - self.stone).max(0.0);
        let stone = (self.stone + stone_room * (1.0 - r)).max(forest_hi + 1e-9);
        Thresholds { water: self.water, forest_lo: self.forest_lo, forest_hi, stone }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { water: 0.25, forest_lo: 0.55, forest_hi: 0.75, stone: 0.85 }
    }
}

pub fn classify_tile(r: f64, t: &Thresholds) -> Terrain {
    if r < t.water {
        Terrain::Water
    } else if r >= t.stone {
        Terrain::Stone
    } else if r >= t.forest_lo && r < t.forest_hi {
        Terrain::Forest
    } else {
        Terrain::Grass
    }
}

/// Builds a map: ridge-fractal interior, lava border, and a grass spawn margin.
/// Redraws with a fresh sub-seed until the interior has forest and water.
pub fn generate_map(cfg: &Config, rng: &mut RngStream) -> Result<TileMap, WorldError> {
    use rand::RngCore;

    let thresholds = Thresholds::from_config(cfg)?;
    let (w, h, b) = (cfg.total_width(), cfg.total_height(), cfg.border_thickness);
    let mut diagnostics = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let fractal = RidgeFractal::new(rng.next_u64(), cfg.terrain.octaves, cfg.terrain.scale);
        let mut map = TileMap::filled(w, h, Terrain::Lava);
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let max_radius = (cfg.map_width.max(cfg.map_height) as f64) / 2.0;
        // Ridge values crowd toward 1, so the field is stretched to span [0, 1]
        // over the interior before thresholding; otherwise pools almost never form.
        let mut field = Vec::with_capacity(cfg.map_width * cfg.map_height);
        for r in b..h - b {
            for c in b..w - b {
                field.push(fractal.sample(c as f64, r as f64));
            }
        }
        let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut values = field.into_iter();
        for r in b..h - b {
            for c in b..w - b {
                let v = (values.next().unwrap_or(lo) - lo) / span;
                let ring = (r - b).min(c - b).min(h - b - 1 - r).min(w - b - 1 - c);
                let terrain = if ring < cfg.spawn_margin {
                    Terrain::Grass
                } else {
                    let t = if cfg.terrain.radial_difficulty {
                        let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                        thresholds.graded(d / max_radius)
                    } else {
                        thresholds
                    };
                    classify_tile(v, &t)
                };
                map.set_terrain(Pos::new(r as i32, c as i32), terrain)?;
            }
        }
        let forest = map.count(Terrain::Forest);
        let water = map.count(Terrain::Water);
        if forest > 0 && water > 0 {
            return Ok(map);
        }
        diagnostics = format!("last attempt {attempt}: forest={forest} water={water}");
    }
    Err(WorldError::GenerationFailed { attempts: MAX_ATTEMPTS, diagnostics })
}
