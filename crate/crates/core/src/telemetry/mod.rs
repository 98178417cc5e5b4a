//! Run instrumentation: where agents go, what the value head thinks of each
//! tile, how long agents live, and how long synchronization takes.

mod bench;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use bench::{bench_sync, linear_fit, BenchPlan, BenchReport, BenchRow, Boundary, LinearFit};

use crate::config::Config;
use crate::engine::{StepOutcome, WorldState};
use crate::neural::{NeuralError, Policy};
use crate::obsio::observe;
use crate::scripted::{scripted_actions, ScriptedPolicy, Variant};
use crate::world::{Pos, TileMap};

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("bench: {0}")]
    Bench(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Io { path: path.to_path_buf(), source }
}

/// Row-major scalar field over the whole map, border included.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    /// One line per row, comma separated, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| format!("{}", self.get(r, c))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Grid, TelemetryError> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TelemetryError::Grid(format!("line {}: {e}", i + 1)))?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(TelemetryError::Grid(format!("line {} has {} values", i + 1, row.len())));
            }
            values.extend(row);
            height += 1;
        }
        Ok(Grid { width: width.unwrap_or(0), height, values })
    }
}

/// Visit counts per population.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitationCounter {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<Vec<u64>>,
}

impl VisitationCounter {
    pub fn new(width: usize, height: usize, n_populations: usize) -> Self {
        Self { width, height, counts: vec![vec![0; width * height]; n_populations.max(1)] }
    }

    pub fn for_state(state: &WorldState) -> Self {
        Self::new(state.map.width(), state.map.height(), state.config.n_populations)
    }

    /// Adds one visit for every living agent at its current tile.
    pub fn record_visits(&mut self, state: &WorldState) {
        for a in state.agents.values() {
            let (r, c) = (a.pos.row, a.pos.col);
            if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
                log::warn!("agent {} outside the counter at ({r},{c})", a.id);
                continue;
            }
            let pop = a.population.min(self.counts.len() - 1);
            self.counts[pop][r as usize * self.width + c as usize] += 1;
        }
    }

    /// Counts for one population, or summed over all.
    pub fn grid(&self, population: Option<usize>) -> Vec<u64> {
        match population {
            Some(p) => self.counts.get(p).cloned().unwrap_or_else(|| vec![0; self.width * self.height]),
            None => (0..self.width * self.height).map(|i| self.counts.iter().map(|g| g[i]).sum()).collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_grid(&self, population: Option<usize>) -> Grid {
        Grid { width: self.width, height: self.height, values: self.grid(population).iter().map(|&v| v as f64).collect() }
    }
}

/// Map coverage by two measures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    /// Share of walkable tiles visited at least once.
    pub visited: f64,
    /// Shannon entropy, in bits, of the visit distribution over walkable tiles.
    pub entropy: f64,
}

pub fn coverage(counter: &VisitationCounter, map: &TileMap, population: Option<usize>) -> Coverage {
    let counts = counter.grid(population);
    let walkable: Vec<u64> = map
        .tiles()
        .iter()
        .zip(&counts)
        .filter(|(t, _)| t.terrain.walkable())
        .map(|(_, &n)| n)
        .collect();
    if walkable.is_empty() {
        return Coverage { visited: 0.0, entropy: 0.0 };
    }
    let visited = walkable.iter().filter(|&&n| n > 0).count() as f64 / walkable.len() as f64;
    let total: u64 = walkable.iter().sum();
    let entropy = if total == 0 {
        0.0
    } else {
        walkable
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| {
                let p = n as f64 / total as f64;
                -p * p.log2()
            })
            .sum()
    };
    Coverage { visited, entropy }
}

/// Value estimate for a fresh agent of `population` standing on each
/// walkable tile, everything else in `state` unchanged. Other tiles are 0.
pub fn value_overlay(policy: &mut Policy<f32>, state: &WorldState, population: usize) -> Result<Grid, TelemetryError> {
    let (w, h) = (state.map.width(), state.map.height());
    let mut grid = Grid::zeros(w, h);
    let mut probe = state.clone();
    let mut start = None;
    for (r, c) in (0..h).flat_map(|r| (0..w).map(move |c| (r, c))) {
        let pos = Pos::new(r as i32, c as i32);
        if !state.map.terrain_or_lava(pos).walkable() {
            continue;
        }
        let id = *start.get_or_insert_with(|| probe.insert_agent(population, pos));
        probe.agents.get_mut(&id).expect("probe agent").pos = pos;
        let obs = observe(&probe, id).map_err(|e| TelemetryError::Grid(e.to_string()))?;
        grid.set(r, c, policy.value(&obs)? as f64);
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColorScale {
    #[default]
    Linear,
    /// ln(1 + v - min), for heavy-tailed visit counts.
    Log,
}

/// Writes `<base>.csv` with exact values and `<base>.pgm`, an 8-bit
/// grayscale image normalized over the drawn tiles. Tiles that are not
/// walkable on `map` are drawn black. A constant field is drawn mid-gray.
pub fn export_heatmap(
    grid: &Grid,
    map: Option<&TileMap>,
    base: &Path,
    scale: ColorScale,
) -> Result<(PathBuf, PathBuf), TelemetryError> {
    if grid.values.len() != grid.width * grid.height || grid.values.iter().any(|v| !v.is_finite()) {
        return Err(TelemetryError::Grid("grid is ragged or not finite".into()));
    }
    if let Some(m) = map {
        if m.width() != grid.width || m.height() != grid.height {
            return Err(TelemetryError::Grid("grid and map sizes differ".into()));
        }
    }
    let drawn = |i: usize| map.map_or(true, |m| m.tiles()[i].terrain.walkable());
    let shown: Vec<f64> = (0..grid.values.len()).filter(|&i| drawn(i)).map(|i| grid.values[i]).collect();
    let lo = shown.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shown.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tf = |v: f64| match scale {
        ColorScale::Linear => v,
        ColorScale::Log => (v - lo).ln_1p(),
    };
    let (a, b) = (tf(lo), tf(hi));
    let pixels: Vec<u8> = (0..grid.values.len())
        .map(|i| {
            if !drawn(i) {
                0
            } else if b > a {
                ((tf(grid.values[i]) - a) / (b - a) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();

    let csv = base.with_extension("csv");
    let pgm = base.with_extension("pgm");
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&csv, grid.to_csv()).map_err(io_err(&csv))?;
    let mut f = fs::File::create(&pgm).map_err(io_err(&pgm))?;
    write!(f, "P5 {} {} 255\n", grid.width, grid.height).map_err(io_err(&pgm))?;
    f.write_all(&pixels).map_err(io_err(&pgm))?;
    Ok((csv, pgm))
}

/// Lifetimes of agents that died, in order of death.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LifetimeLog {
    pub lifetimes: Vec<u64>,
    pub by_population: Vec<Vec<u64>>,
}

impl LifetimeLog {
    pub fn record(&mut self, outcome: &StepOutcome) {
        for d in &outcome.events.deaths {
            self.lifetimes.push(d.lifetime);
            if self.by_population.len() <= d.population {
                self.by_population.resize(d.population + 1, Vec::new());
            }
            self.by_population[d.population].push(d.lifetime);
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.lifetimes.is_empty()).then(|| self.lifetimes.iter().sum::<u64>() as f64 / self.lifetimes.len() as f64)
    }
}

/// Runs `ticks` ticks of a scripted policy from a fresh world and returns
/// the visit counts and final state.
pub fn scripted_visits(cfg: &Config, variant: Variant, ticks: u64) -> Result<(VisitationCounter, WorldState), TelemetryError> {
    let mut state = WorldState::new(cfg.clone()).map_err(|e| TelemetryError::Grid(e.to_string()))?;
    let mut policy = ScriptedPolicy::new(variant, cfg, 0);
    let mut counter = VisitationCounter::for_state(&state);
    for _ in 0..ticks {
        let actions = scripted_actions(&state, &mut policy).map_err(|e| TelemetryError::Grid(e.to_string()))?;
        state.step(&actions);
        counter.record_visits(&state);
    }
    Ok((counter, state))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Terrain;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut g = Grid::zeros(3, 2);
        let vals = [0.1, -2.5e-7, 1.0 / 3.0, 7.0, f64::MAX, -0.0];
        g.values.copy_from_slice(&vals);
        let back = Grid::from_csv(&g.to_csv()).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for (a, b) in back.values.iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(Grid::from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn pgm_header_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = Grid::zeros(64, 64);
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = i as f64;
        }
        let (_, pgm) = export_heatmap(&g, None, &dir.path().join("ramp"), ColorScale::Linear).unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        let header = b"P5 64 64 255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 64 * 64);
        assert_eq!((px[0], px[px.len() - 1]), (0, 255));

        let flat = Grid { width: 4, height: 2, values: vec![3.5; 8] };
        let (_, pgm) = export_heatmap(&flat, None, &dir.path().join("flat"), ColorScale::Log).unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        let px = &bytes[b"P5 4 2 255\n".len()..];
        assert!(px.iter().all(|&p| p == px[0]));
    }

    #[test]
    fn impassable_tiles_are_black() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = TileMap::filled(3, 1, Terrain::Grass);
        map.set_terrain(Pos::new(0, 1), Terrain::Lava).unwrap();
        let g = Grid { width: 3, height: 1, values: vec![1.0, 100.0, 2.0] };
        let (_, pgm) = export_heatmap(&g, Some(&map), &dir.path().join("m"), ColorScale::Linear).unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 255]);
        let bad = Grid { width: 3, height: 1, values: vec![1.0, f64::NAN, 2.0] };
        assert!(export_heatmap(&bad, None, &dir.path().join("n"), ColorScale::Linear).is_err());
    }

    #[test]
    fn coverage_extremes() {
        let mut map = TileMap::filled(4, 4, Terrain::Lava);
        for p in [Pos::new(1, 1), Pos::new(1, 2), Pos::new(2, 1), Pos::new(2, 2)] {
            map.set_terrain(p, Terrain::Grass).unwrap();
        }
        let mut c = VisitationCounter::new(4, 4, 2);
        assert_eq!(coverage(&c, &map, None), Coverage { visited: 0.0, entropy: 0.0 });
        for (i, idx) in [5usize, 6, 9, 10].iter().enumerate() {
            c.counts[i % 2][*idx] = 3;
        }
        let all = coverage(&c, &map, None);
        assert_eq!(all.visited, 1.0);
        assert!((all.entropy - 2.0).abs() < 1e-12);
        assert_eq!(coverage(&c, &map, Some(0)).visited, 0.5);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
