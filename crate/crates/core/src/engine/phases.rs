use crate::agents::{AgentState, Skill};
use crate::config::{Config, SpawnRegion};
use crate::world::{Pos, Terrain, TileMap};

use super::{ForageEvent, Move, UpkeepEvent};

/// Destination of a move; blocked and frozen moves stay put.
pub fn resolve_move(map: &TileMap, agent: &AgentState, dir: Move, tick: u64) -> Pos {
    if agent.is_frozen(tick) {
        return agent.pos;
    }
    let (dr, dc) = dir.delta();
    let target = agent.pos.offset(dr, dc);
    match map.terrain(target) {
        Ok(t) if t.passable() => target,
        _ => agent.pos,
    }
}

/// Harvests forest underfoot and drinks from any 4-adjacent water.
pub fn forage_step(map: &mut TileMap, agent: &mut AgentState, cfg: &Config) -> Option<ForageEvent> {
    let mut event = ForageEvent { agent: agent.id, food: 0, water: 0, consumed_forest: false };
    if map.consume_forest(agent.pos, cfg.forest_regen_ticks).unwrap_or(false) {
        let gain = cfg.forage_food + agent.skills.level(Skill::Hunting) - 1;
        let cap = agent.food_cap(cfg);
        event.food = gain.min(cap.saturating_sub(agent.food));
        event.consumed_forest = true;
        agent.food += event.food;
        agent.gain_xp(Skill::Hunting, cfg.progression.forage_xp, cfg);
    }
    let near_water = agent.pos.neighbors4().iter().any(|&p| map.terrain_or_lava(p) == Terrain::Water);
    if near_water {
        let gain = cfg.forage_water + agent.skills.level(Skill::Fishing) - 1;
        let cap = agent.water_cap(cfg);
        event.water = gain.min(cap.saturating_sub(agent.water));
        agent.water += event.water;
        agent.gain_xp(Skill::Fishing, cfg.progression.forage_xp, cfg);
    }
    (event.consumed_forest || near_water).then_some(event)
}

/// Hunger, thirst, and regeneration for one tick.
pub fn survival_step(agent: &mut AgentState, cfg: &Config) -> UpkeepEvent {
    let food_used = agent.food.min(cfg.starvation_rate);
    let water_used = agent.water.min(cfg.starvation_rate);
    agent.food -= food_used;
    agent.water -= water_used;
    let before = agent.health;
    let empties = (agent.food == 0) as u32 + (agent.water == 0) as u32;
    agent.health = agent.health.saturating_sub(empties * cfg.starvation_rate);
    if agent.food * 2 > cfg.food_max && agent.water * 2 > cfg.water_max {
        agent.health = (agent.health + cfg.regen_rate).min(agent.max_health(cfg));
    }
    UpkeepEvent {
        agent: agent.id,
        food: food_used,
        water: water_used,
        health_delta: agent.health as i64 - before as i64,
    }
}

/// Walkable tiles an agent may spawn on.
pub fn spawn_tiles(map: &TileMap, cfg: &Config) -> Vec<Pos> {
    let b = cfg.border_thickness as i32;
    let (w, h) = (map.width() as i32, map.height() as i32);
    let walkable = |p: &Pos| map.terrain(*p).map(Terrain::walkable).unwrap_or(false);
    match cfg.spawn_region {
        SpawnRegion::Border => {
            let (r0, r1, c0, c1) = (b, h - b - 1, b, w - b - 1);
            map.positions()
                .filter(|p| {
                    (p.row == r0 || p.row == r1 || p.col == c0 || p.col == c1)
                        && (r0..=r1).contains(&p.row)
                        && (c0..=c1).contains(&p.col)
                })
                .filter(walkable)
                .collect()
        }
        SpawnRegion::Center => {
            let (r0, c0) = (h / 2 - 4, w / 2 - 4);
            map.positions()
                .filter(|p| (r0..r0 + 8).contains(&p.row) && (c0..c0 + 8).contains(&p.col))
                .filter(walkable)
                .collect()
        }
    }
}
