use crate::agents::{AgentId, Skill};
use crate::config::{AttackRule, CombatConfig};

use super::{HitEvent, MissEvent, Style, TickEvents, WorldState};

pub fn hit_chance(attack_level: u32, defense_level: u32, cfg: &CombatConfig) -> f64 {
    let raw = cfg.accuracy_base + cfg.accuracy_slope * (attack_level as f64 - defense_level as f64);
    raw.clamp(cfg.accuracy_floor, cfg.accuracy_ceiling)
}

pub fn damage(style: Style, style_level: u32, cfg: &CombatConfig) -> u32 {
    cfg.base_damage.get(style) + style_level / cfg.damage_level_divisor.max(1)
}

pub fn style_skill(style: Style) -> Skill {
    match style {
        Style::Melee => Skill::Melee,
        Style::Range => Skill::Range,
        Style::Mage => Skill::Mage,
    }
}

/// Range, liveness and the configured attack rule.
pub fn attackable(state: &WorldState, attacker: AgentId, target: AgentId, style: Style) -> bool {
    if attacker == target {
        return false;
    }
    let (Some(a), Some(t)) = (state.agents.get(&attacker), state.agents.get(&target)) else {
        return false;
    };
    if !a.alive || !t.alive || a.health == 0 || t.health == 0 {
        return false;
    }
    let cfg = &state.config;
    if a.pos.chebyshev(t.pos) > cfg.combat.ranges.get(style) {
        return false;
    }
    match cfg.attack_rule {
        AttackRule::SpawnSafety(window) => state.tick.saturating_sub(t.spawn_tick) >= window,
        AttackRule::LevelRange(range) => a.level().abs_diff(t.level()) <= range,
    }
}

/// Rolls one attack. The caller has already checked [`attackable`].
pub(super) fn resolve_attack(
    state: &mut WorldState,
    attacker: AgentId,
    style: Style,
    target: AgentId,
    killers: &mut std::collections::BTreeMap<AgentId, AgentId>,
    events: &mut TickEvents,
) {
    let cfg = std::sync::Arc::clone(&state.config);
    let skill = style_skill(style);
    let (style_level, defense_level) = {
        let a = &state.agents[&attacker];
        let t = &state.agents[&target];
        (a.skills.level(skill), t.skills.level(Skill::Defense))
    };
    let p = hit_chance(style_level, defense_level, &cfg.combat);
    let roll = state.combat_rng.unit();
    if roll >= p {
        events.misses.push(MissEvent { attacker, defender: target, style });
        return;
    }
    let dmg = damage(style, style_level, &cfg.combat);
    let xp = dmg as f64 * cfg.progression.combat_xp_per_damage;
    let freeze = style == Style::Mage && cfg.combat.freeze_ticks > 0;
    let tick = state.tick;
    let t = state.agents.get_mut(&target).expect("target checked by attackable");
    t.health = t.health.saturating_sub(dmg);
    if freeze {
        t.frozen_until = t.frozen_until.max(tick + cfg.combat.freeze_ticks);
    }
    t.gain_xp(Skill::Defense, xp, &cfg);
    t.gain_xp(Skill::Constitution, xp / 2.0, &cfg);
    if t.health == 0 {
        killers.insert(target, attacker);
    }
    let a = state.agents.get_mut(&attacker).expect("attacker checked by attackable");
    a.gain_xp(skill, xp, &cfg);
    a.gain_xp(Skill::Constitution, xp / 2.0, &cfg);
    events.hits.push(HitEvent { attacker, defender: target, style, damage: dmg, froze: freeze });
}
