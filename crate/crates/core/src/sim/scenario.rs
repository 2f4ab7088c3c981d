use serde::{Deserialize, Serialize};

use crate::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::fsc::AgentSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Uav,
    Ugv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

/// Axis-aligned rectangle of cells `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x && c.x < self.x + self.w && c.y >= self.y && c.y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        (self.w.max(0) * self.h.max(0)) as usize
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| Cell::new(x, y)))
    }

    /// The cell of the rectangle closest to `c`.
    pub fn clamp(&self, c: Cell) -> Cell {
        Cell::new(
            c.x.clamp(self.x, self.x + self.w - 1),
            c.y.clamp(self.y, self.y + self.h - 1),
        )
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// World geometry and dynamics. Site ids are 1-based; site 1 is the muster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub width: i32,
    pub height: i32,
    pub sites: Vec<Rect>,
    pub obstacles: Vec<Cell>,
    pub victims: usize,
    pub health_min: f64,
    pub health_max: f64,
    /// Health lost per primitive step by every victim not yet at the muster.
    pub degradation: f64,
    pub critical_threshold: f64,
    pub agents: Vec<AgentKind>,
    pub ugv_speed: i32,
    pub uav_speed: i32,
    pub ugv_comm_range: i32,
    /// Range of any link that involves a UAV.
    pub uav_comm_range: i32,
    pub obs_noise_prob: f64,
    pub comm_fail_prob: f64,
    pub max_steps: u64,
    /// Steps after which a running macro-action is abandoned.
    pub macro_timeout: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 20,
            height: 10,
            sites: vec![
                Rect::new(0, 0, 3, 3),
                Rect::new(17, 7, 3, 3),
                Rect::new(16, 0, 3, 2),
                Rect::new(8, 7, 2, 3),
                Rect::new(9, 1, 3, 3),
                Rect::new(1, 7, 3, 2),
            ],
            obstacles: [(5, 1), (6, 4), (13, 2), (14, 5), (5, 8), (12, 6), (7, 6), (16, 4)]
                .into_iter()
                .map(|(x, y)| Cell::new(x, y))
                .collect(),
            victims: 6,
            health_min: 0.3,
            health_max: 1.0,
            degradation: 0.002,
            critical_threshold: 1.0 / 3.0,
            agents: vec![AgentKind::Uav, AgentKind::Ugv, AgentKind::Ugv, AgentKind::Ugv],
            ugv_speed: 1,
            uav_speed: 5,
            ugv_comm_range: 3,
            uav_comm_range: 6,
            obs_noise_prob: 0.05,
            comm_fail_prob: 0.05,
            max_steps: 600,
            macro_timeout: 120,
        }
    }
}

impl ScenarioConfig {
    /// Three sites, three victims and two UGVs on a 10x6 grid, with frail victims.
    pub fn mini() -> Self {
        Self {
            width: 10,
            height: 6,
            sites: vec![Rect::new(0, 0, 2, 2), Rect::new(7, 0, 3, 2), Rect::new(6, 4, 3, 2)],
            obstacles: vec![Cell::new(4, 1), Cell::new(3, 4)],
            victims: 3,
            health_min: 0.1,
            health_max: 0.6,
            degradation: 0.01,
            agents: vec![AgentKind::Ugv, AgentKind::Ugv],
            max_steps: 150,
            macro_timeout: 64,
            ..Self::default()
        }
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn muster(&self) -> &Rect {
        &self.sites[0]
    }

    /// `18 s^2`.
    pub fn num_observations(&self) -> usize {
        18 * self.num_sites() * self.num_sites()
    }

    pub fn num_actions(&self, kind: AgentKind) -> usize {
        match kind {
            AgentKind::Uav => self.num_sites(),
            AgentKind::Ugv => self.num_sites() + 1,
        }
    }

    pub fn agent_specs(&self, num_nodes: usize) -> Vec<AgentSpec> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, &k)| AgentSpec::new(i, self.num_actions(k), self.num_observations(), num_nodes))
            .collect()
    }

    pub fn in_grid(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacles.contains(&c)
    }

    /// 1-based id of the site containing `c`.
    pub fn site_of(&self, c: Cell) -> Option<usize> {
        self.sites.iter().position(|r| r.contains(c)).map(|i| i + 1)
    }

    pub fn site(&self, id: usize) -> &Rect {
        &self.sites[id - 1]
    }

    pub fn comm_range(&self, a: AgentKind, b: AgentKind) -> i32 {
        if a == AgentKind::Uav || b == AgentKind::Uav {
            self.uav_comm_range
        } else {
            self.ugv_comm_range
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("scenario: {m}")));
        if self.width < 1 || self.height < 1 {
            return fail("grid must be at least 1x1".into());
        }
        if self.sites.is_empty() {
            return fail("a muster site is required".into());
        }
        for (i, s) in self.sites.iter().enumerate() {
            if s.w < 1 || s.h < 1 {
                return fail(format!("site {} is empty", i + 1));
            }
            if s.x < 0 || s.y < 0 || s.x + s.w > self.width || s.y + s.h > self.height {
                return fail(format!("site {} leaves the grid", i + 1));
            }
            if let Some(j) = self.sites[..i].iter().position(|o| o.overlaps(s)) {
                return fail(format!("sites {} and {} overlap", j + 1, i + 1));
            }
        }
        for (i, &o) in self.obstacles.iter().enumerate() {
            if !self.in_grid(o) {
                return fail(format!("obstacle ({}, {}) outside the grid", o.x, o.y));
            }
            if self.site_of(o).is_some() {
                return fail(format!("obstacle ({}, {}) inside a site", o.x, o.y));
            }
            if self.obstacles[..i].contains(&o) {
                return fail(format!("obstacle ({}, {}) listed twice", o.x, o.y));
            }
        }
        let capacity: usize = self.sites[1..].iter().map(Rect::area).sum();
        if self.victims > capacity {
            return fail(format!("{} victims exceed site capacity {capacity}", self.victims));
        }
        if !(self.health_min > 0.0 && self.health_min <= self.health_max && self.health_max <= 1.0) {
            return fail("initial health range must satisfy 0 < min <= max <= 1".into());
        }
        if !(self.degradation >= 0.0 && self.degradation.is_finite()) {
            return fail("degradation must be >= 0".into());
        }
        for (name, p) in [
            ("obs_noise_prob", self.obs_noise_prob),
            ("comm_fail_prob", self.comm_fail_prob),
            ("critical_threshold", self.critical_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.agents.is_empty() {
            return fail("no agents".into());
        }
        if self.ugv_speed != 1 {
            return fail("ground vehicles move exactly one cell per step".into());
        }
        if self.uav_speed < 1 {
            return fail("uav_speed must be >= 1".into());
        }
        if self.ugv_comm_range < 0 || self.uav_comm_range < 0 {
            return fail("communication ranges must be >= 0".into());
        }
        if self.max_steps == 0 || self.macro_timeout == 0 {
            return fail("max_steps and macro_timeout must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(format!("scenario file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("scenario serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ScenarioConfig::default().validate().unwrap();
        ScenarioConfig::mini().validate().unwrap();
        assert_eq!(ScenarioConfig::default().num_observations(), 648);
        assert_eq!(ScenarioConfig::default().num_actions(AgentKind::Ugv), 7);
        assert_eq!(ScenarioConfig::default().num_actions(AgentKind::Uav), 6);
    }

    #[test]
    fn toml_round_trip_keeps_digest() {
        let s = ScenarioConfig::mini();
        let back = ScenarioConfig::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_ne!(s.digest(), ScenarioConfig::default().digest());
    }

    #[test]
    fn overlapping_sites_are_rejected() {
        let mut s = ScenarioConfig::default();
        s.sites[1] = Rect::new(1, 1, 3, 3);
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn too_many_victims_are_rejected() {
        let mut s = ScenarioConfig::mini();
        s.victims = 13;
        assert!(s.validate().is_err());
        s.victims = 12;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn bad_probability_is_rejected() {
        let mut s = ScenarioConfig::default();
        s.comm_fail_prob = 1.5;
        assert!(s.validate().is_err());
    }
}
