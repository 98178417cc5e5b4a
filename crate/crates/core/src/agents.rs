//! Agent state and the progression formulas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::world::Pos;

pub type AgentId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("experience must be a non-negative finite number, got {0}")]
    BadXp(f64),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    Hunting,
    Fishing,
    Constitution,
    Melee,
    Range,
    Mage,
    Defense,
}

impl Skill {
    pub const ALL: [Skill; 7] =
        [Skill::Hunting, Skill::Fishing, Skill::Constitution, Skill::Melee, Skill::Range, Skill::Mage, Skill::Defense];
    pub const COMBAT: [Skill; 5] = [Skill::Constitution, Skill::Melee, Skill::Range, Skill::Mage, Skill::Defense];

    pub fn as_str(self) -> &'static str {
        match self {
            Skill::Hunting => "hunting",
            Skill::Fishing => "fishing",
            Skill::Constitution => "constitution",
            Skill::Melee => "melee",
            Skill::Range => "range",
            Skill::Mage => "mage",
            Skill::Defense => "defense",
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Skill {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Skill::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| AgentError::UnknownSkill(s.to_string()))
    }
}

/// Experience per skill, indexed in [`Skill::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Skills {
    xp: [f64; 7],
}

impl Skills {
    pub fn xp(&self, skill: Skill) -> f64 {
        self.xp[skill as usize]
    }

    pub fn set_xp(&mut self, skill: Skill, xp: f64) -> Result<(), AgentError> {
        if !(xp.is_finite() && xp >= 0.0) {
            return Err(AgentError::BadXp(xp));
        }
        self.xp[skill as usize] = xp;
        Ok(())
    }

    /// `1 + floor(sqrt(xp / 100))` for one skill.
    pub fn level(&self, skill: Skill) -> u32 {
        level_for(self.xp(skill), XP_PER_LEVEL)
    }
}

const XP_PER_LEVEL: f64 = 100.0;

fn level_for(xp: f64, per_level: f64) -> u32 {
    1 + (xp / per_level).sqrt().floor() as u32
}

/// `1 + floor(sqrt(xp / 100))`.
pub fn level_from_xp(xp: f64) -> Result<u32, AgentError> {
    if !(xp.is_finite() && xp >= 0.0) {
        return Err(AgentError::BadXp(xp));
    }
    Ok(level_for(xp, XP_PER_LEVEL))
}

/// Mean of the five combat levels, rounded half up.
pub fn overall_level(skills: &Skills) -> u32 {
    overall_from_levels(Skill::COMBAT.map(|s| skills.level(s)))
}

pub fn overall_from_levels(levels: [u32; 5]) -> u32 {
    let sum: u32 = levels.iter().sum();
    // round(sum / 5) with halves going up, in integers
    (2 * sum + 5) / 10
}

pub fn food_cap(skills: &Skills, cfg: &Config) -> u32 {
    cfg.food_max + skills.level(Skill::Hunting) - 1
}

pub fn water_cap(skills: &Skills, cfg: &Config) -> u32 {
    cfg.water_max + skills.level(Skill::Fishing) - 1
}

pub fn max_health(skills: &Skills, cfg: &Config) -> u32 {
    cfg.health_max + skills.level(Skill::Constitution) - 1
}

pub fn grant_xp(skills: &Skills, skill: Skill, amount: f64, xp_scale: f64) -> Result<Skills, AgentError> {
    if !(amount.is_finite() && amount >= 0.0) {
        return Err(AgentError::BadXp(amount));
    }
    let mut out = *skills;
    out.set_xp(skill, skills.xp(skill) + amount * xp_scale)?;
    Ok(out)
}

/// [`grant_xp`] addressed by skill name.
pub fn grant_xp_named(skills: &Skills, skill: &str, amount: f64, xp_scale: f64) -> Result<Skills, AgentError> {
    grant_xp(skills, skill.parse()?, amount, xp_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: AgentId,
    pub population: usize,
    pub pos: Pos,
    pub food: u32,
    pub water: u32,
    pub health: u32,
    pub skills: Skills,
    /// Last tick on which the agent cannot move.
    pub frozen_until: u64,
    pub spawn_tick: u64,
    pub alive: bool,
}

impl AgentState {
    pub fn spawn(id: AgentId, population: usize, pos: Pos, tick: u64, cfg: &Config) -> Self {
        Self {
            id,
            population,
            pos,
            food: cfg.food_max,
            water: cfg.water_max,
            health: cfg.health_max,
            skills: Skills::default(),
            frozen_until: tick,
            spawn_tick: tick,
            alive: true,
        }
    }

    /// Frozen during the step that runs at `tick`.
    pub fn is_frozen(&self, tick: u64) -> bool {
        tick <= self.frozen_until && self.frozen_until > self.spawn_tick
    }

    pub fn level(&self) -> u32 {
        overall_level(&self.skills)
    }

    pub fn food_cap(&self, cfg: &Config) -> u32 {
        food_cap(&self.skills, cfg)
    }

    pub fn water_cap(&self, cfg: &Config) -> u32 {
        water_cap(&self.skills, cfg)
    }

    pub fn max_health(&self, cfg: &Config) -> u32 {
        max_health(&self.skills, cfg)
    }

    pub fn gain_xp(&mut self, skill: Skill, amount: f64, cfg: &Config) {
        let scaled = amount * cfg.xp_scale;
        if scaled.is_finite() && scaled > 0.0 {
            self.skills.xp[skill as usize] += scaled;
        }
    }

    /// Telemetry row: `tick,agent_id,population,x,y,food,water,health,level`.
    pub fn csv_row(&self, tick: u64) -> String {
        format!(
            "{tick},{},{},{},{},{},{},{},{}",
            self.id,
            self.population,
            self.pos.col,
            self.pos.row,
            self.food,
            self.water,
            self.health,
            self.level()
        )
    }
}

pub const AGENT_CSV_HEADER: &str = "tick,agent_id,population,x,y,food,water,health,level";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;
    use proptest::prelude::*;

    fn with_levels(levels: &[(Skill, u32)]) -> Skills {
        let mut s = Skills::default();
        for &(k, l) in levels {
            s.set_xp(k, ((l - 1) * (l - 1)) as f64 * 100.0).unwrap();
        }
        s
    }

    #[test]
    fn level_curve() {
        assert_eq!(level_from_xp(0.0), Ok(1));
        assert_eq!(level_from_xp(99.9), Ok(1));
        assert_eq!(level_from_xp(100.0), Ok(2));
        assert_eq!(level_from_xp(400.0), Ok(3));
        assert!(level_from_xp(-1.0).is_err());
        assert!(level_from_xp(f64::NAN).is_err());
    }

    #[test]
    fn overall_examples() {
        assert_eq!(overall_level(&Skills::default()), 1);
        assert_eq!(overall_level(&with_levels(&[(Skill::Defense, 6)])), 2);
        let all3: Vec<_> = Skill::COMBAT.iter().map(|&k| (k, 3)).collect();
        assert_eq!(overall_level(&with_levels(&all3)), 3);
        // 7/5 = 1.4 rounds down, 8/5 = 1.6 rounds up, 2.5 rounds up
        assert_eq!(overall_from_levels([1, 1, 1, 1, 3]), 1);
        assert_eq!(overall_from_levels([1, 1, 1, 1, 4]), 2);
        assert_eq!(overall_from_levels([2, 2, 3, 3, 2]) , 2);
        assert_eq!(overall_from_levels([2, 2, 3, 3, 2 + 5]), 3);
        // hunting does not count
        assert_eq!(overall_level(&with_levels(&[(Skill::Hunting, 9)])), 1);
    }

    #[test]
    fn caps() {
        let cfg = default_config();
        assert_eq!(food_cap(&Skills::default(), &cfg), 10);
        assert_eq!(food_cap(&with_levels(&[(Skill::Hunting, 4)]), &cfg), 13);
        assert_eq!(water_cap(&with_levels(&[(Skill::Fishing, 2)]), &cfg), 11);
        assert_eq!(max_health(&Skills::default(), &cfg), 10);
        assert_eq!(max_health(&with_levels(&[(Skill::Constitution, 5)]), &cfg), 14);
    }

    #[test]
    fn grant_examples() {
        let s = Skills::default();
        assert_eq!(grant_xp(&s, Skill::Hunting, 10.0, 1.0).unwrap().xp(Skill::Hunting), 10.0);
        assert_eq!(grant_xp(&s, Skill::Hunting, 10.0, 0.0).unwrap(), s);
        assert_eq!(grant_xp(&s, Skill::Melee, 10.0, 2.0).unwrap().xp(Skill::Melee), 20.0);
        assert_eq!(grant_xp_named(&s, "melee", 5.0, 1.0).unwrap().xp(Skill::Melee), 5.0);
        assert_eq!(grant_xp_named(&s, "cooking", 5.0, 1.0), Err(AgentError::UnknownSkill("cooking".into())));
        assert!(grant_xp(&s, Skill::Melee, -1.0, 1.0).is_err());
    }

    #[test]
    fn freeze_window() {
        let cfg = default_config();
        let mut a = AgentState::spawn(0, 0, Pos::new(0, 0), 5, &cfg);
        assert!(!a.is_frozen(6));
        a.frozen_until = 10 + 3;
        assert!(!a.is_frozen(14));
        assert!(a.is_frozen(11) && a.is_frozen(13));
    }

    proptest! {
        #[test]
        fn grants_never_lower_levels(xp in 0.0f64..1e6, amount in 0.0f64..1e4, scale in 0.0f64..10.0, k in 0usize..7) {
            let skill = Skill::ALL[k];
            let mut s = Skills::default();
            s.set_xp(skill, xp).unwrap();
            let before = Skill::ALL.map(|q| s.level(q));
            let after = grant_xp(&s, skill, amount, scale).unwrap();
            for (i, q) in Skill::ALL.iter().enumerate() {
                prop_assert!(after.level(*q) >= before[i]);
                if *q != skill { prop_assert_eq!(after.xp(*q), s.xp(*q)); }
            }
        }

        #[test]
        fn level_monotone(a in 0.0f64..1e7, b in 0.0f64..1e7) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(level_from_xp(lo).unwrap() <= level_from_xp(hi).unwrap());
        }
    }
}
