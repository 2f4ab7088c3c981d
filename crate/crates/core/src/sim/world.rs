use rand::seq::index::sample;
use rand::Rng;

use super::scenario::{AgentKind, Cell, ScenarioConfig};
use crate::dataset::RewardEvent;
use crate::error::{Error, Result};

/// Health below this counts as dead.
pub const DEATH_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VictimStatus {
    InField,
    /// Carried by the given agent.
    Carried(usize),
    Rescued,
    Dead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Victim {
    pub id: usize,
    /// Site the victim started in.
    pub site: usize,
    pub pos: Cell,
    pub health: f64,
    pub status: VictimStatus,
}

impl Victim {
    pub fn in_field(&self) -> bool {
        self.status == VictimStatus::InField
    }

    pub fn resolved(&self) -> bool {
        matches!(self.status, VictimStatus::Rescued | VictimStatus::Dead)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub kind: AgentKind,
    pub pos: Cell,
    pub carrying: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveAction {
    Stay,
    /// Move to the given cell; must be reachable in one step.
    Move(Cell),
    PickUp(usize),
    DropOff,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub clock: u64,
    pub agents: Vec<AgentState>,
    pub victims: Vec<Victim>,
}

/// Uniform composition of `total` into `caps.len()` parts, each within its cap.
fn bounded_composition<R: Rng + ?Sized>(rng: &mut R, total: usize, caps: &[usize]) -> Vec<usize> {
    let parts = caps.len();
    loop {
        let slots = total + parts - 1;
        let mut bars: Vec<usize> = sample(rng, slots, parts - 1).into_vec();
        bars.sort_unstable();
        let mut counts = Vec::with_capacity(parts);
        let mut prev = 0;
        for &b in &bars {
            counts.push(b - prev);
            prev = b + 1;
        }
        counts.push(slots - prev);
        if counts.iter().zip(caps).all(|(c, cap)| c <= cap) {
            return counts;
        }
    }
}

impl WorldState {
    /// Fresh episode: agents spread over the muster, victims scattered over the other sites.
    pub fn new<R: Rng + ?Sized>(scenario: &ScenarioConfig, rng: &mut R) -> Result<Self> {
        scenario.validate()?;
        let muster: Vec<Cell> = scenario.muster().cells().collect();
        let agents = scenario
            .agents
            .iter()
            .enumerate()
            .map(|(i, &kind)| AgentState {
                kind,
                pos: muster[i % muster.len()],
                carrying: None,
            })
            .collect();
        let mut victims = Vec::with_capacity(scenario.victims);
        if scenario.victims > 0 {
            let caps: Vec<usize> = scenario.sites[1..].iter().map(|r| r.area()).collect();
            let counts = bounded_composition(rng, scenario.victims, &caps);
            for (i, &n) in counts.iter().enumerate() {
                let site = i + 2;
                let cells: Vec<Cell> = scenario.site(site).cells().collect();
                for k in sample(rng, cells.len(), n) {
                    let health = rng.random_range(scenario.health_min..=scenario.health_max);
                    victims.push(Victim {
                        id: victims.len(),
                        site,
                        pos: cells[k],
                        health,
                        status: VictimStatus::InField,
                    });
                }
            }
        }
        Ok(Self {
            clock: 0,
            agents,
            victims,
        })
    }

    pub fn all_resolved(&self) -> bool {
        self.victims.iter().all(Victim::resolved)
    }

    /// Alive, uncarried victims at a site.
    pub fn victims_at_site<'a>(&'a self, scenario: &'a ScenarioConfig, site: usize) -> impl Iterator<Item = &'a Victim> + 'a {
        let rect = *scenario.site(site);
        self.victims.iter().filter(move |v| v.in_field() && rect.contains(v.pos))
    }

    /// Ground-truth site status as a ground sensor reads it: 0 none, 1 present, 2 someone critical.
    pub fn site_status(&self, scenario: &ScenarioConfig, site: usize) -> u8 {
        let mut status = 0;
        for v in self.victims_at_site(scenario, site) {
            if v.health < scenario.critical_threshold {
                return 2;
            }
            status = 1;
        }
        status
    }

    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for v in &self.victims {
            match v.status {
                VictimStatus::Rescued => c.0 += 1,
                VictimStatus::Dead => c.1 += 1,
                VictimStatus::InField => c.2 += 1,
                VictimStatus::Carried(_) => c.3 += 1,
            }
        }
        c
    }
}

fn check_move(scenario: &ScenarioConfig, agent: usize, a: &AgentState, to: Cell) -> Result<()> {
    let ok = scenario.in_grid(to)
        && match a.kind {
            AgentKind::Ugv => a.pos.manhattan(to) <= scenario.ugv_speed && !scenario.is_obstacle(to),
            AgentKind::Uav => a.pos.chebyshev(to) <= scenario.uav_speed,
        };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "agent {agent} cannot move from ({}, {}) to ({}, {})",
            a.pos.x, a.pos.y, to.x, to.y
        )))
    }
}

/// Advance the world by one primitive step.
///
/// Actions are applied in agent order, then every victim not yet at the muster
/// loses `degradation` health. Returned events are stamped with the index of
/// this step, i.e. the clock value before it.
pub fn simulate_primitive_step(
    world: &mut WorldState,
    scenario: &ScenarioConfig,
    actions: &[PrimitiveAction],
) -> Result<Vec<RewardEvent>> {
    if actions.len() != world.agents.len() {
        return Err(Error::Contract(format!(
            "{} actions for {} agents",
            actions.len(),
            world.agents.len()
        )));
    }
    for (i, (a, act)) in world.agents.iter().zip(actions).enumerate() {
        match *act {
            PrimitiveAction::Move(to) => check_move(scenario, i, a, to)?,
            PrimitiveAction::PickUp(_) | PrimitiveAction::DropOff if a.kind == AgentKind::Uav => {
                return Err(Error::Contract(format!("agent {i} is aerial and cannot handle victims")));
            }
            PrimitiveAction::PickUp(v) if v >= world.victims.len() => {
                return Err(Error::Contract(format!("agent {i} targets unknown victim {v}")));
            }
            _ => {}
        }
    }

    let t = world.clock;
    let mut events = Vec::new();
    for (i, act) in actions.iter().enumerate() {
        match *act {
            PrimitiveAction::Stay => {}
            PrimitiveAction::Move(to) => {
                world.agents[i].pos = to;
                if let Some(v) = world.agents[i].carrying {
                    world.victims[v].pos = to;
                }
            }
            PrimitiveAction::PickUp(v) => {
                let a = &world.agents[i];
                let victim = &world.victims[v];
                if a.carrying.is_none() && victim.in_field() && victim.pos == a.pos {
                    world.victims[v].status = VictimStatus::Carried(i);
                    world.agents[i].carrying = Some(v);
                }
            }
            PrimitiveAction::DropOff => {
                let a = &world.agents[i];
                if let Some(v) = a.carrying {
                    if scenario.muster().contains(a.pos) {
                        let victim = &mut world.victims[v];
                        victim.status = VictimStatus::Rescued;
                        victim.health = 1.0;
                        victim.pos = a.pos;
                        world.agents[i].carrying = None;
                        events.push(RewardEvent { t, r: 1.0 });
                    }
                }
            }
        }
    }

    for v in 0..world.victims.len() {
        let victim = &mut world.victims[v];
        if !matches!(victim.status, VictimStatus::InField | VictimStatus::Carried(_)) {
            continue;
        }
        victim.health = (victim.health - scenario.degradation).max(0.0);
        if victim.health < DEATH_EPS {
            victim.health = 0.0;
            if let VictimStatus::Carried(a) = victim.status {
                world.agents[a].carrying = None;
            }
            victim.status = VictimStatus::Dead;
            events.push(RewardEvent { t, r: -1.0 });
        }
    }
    world.clock += 1;
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn world(scenario: &ScenarioConfig) -> WorldState {
        WorldState::new(scenario, &mut stream(3, &[])).unwrap()
    }

    #[test]
    fn initial_world_respects_sites_and_capacity() {
        let s = ScenarioConfig::default();
        for seed in 0..50 {
            let w = WorldState::new(&s, &mut stream(seed, &[])).unwrap();
            assert_eq!(w.victims.len(), 6);
            for v in &w.victims {
                assert!(s.site(v.site).contains(v.pos));
                assert!(v.site >= 2);
                assert!((0.3..=1.0).contains(&v.health));
            }
            let mut cells: Vec<Cell> = w.victims.iter().map(|v| v.pos).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 6);
            assert!(w.agents.iter().all(|a| s.muster().contains(a.pos)));
        }
    }

    #[test]
    fn composition_is_uniform_over_small_case() {
        // 2 victims over 2 sites: (0,2), (1,1), (2,0) equally likely
        let mut rng = stream(1, &[]);
        let mut hist = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            hist[bounded_composition(&mut rng, 2, &[5, 5])[0]] += 1;
        }
        for h in hist {
            assert!((h as f64 / n as f64 - 1.0 / 3.0).abs() < 0.015);
        }
    }

    #[test]
    fn idle_step_degrades_health_linearly() {
        let s = ScenarioConfig::default();
        let mut w = world(&s);
        let before = w.clone();
        let ev = simulate_primitive_step(&mut w, &s, &[PrimitiveAction::Stay; 4]).unwrap();
        assert!(ev.is_empty());
        assert_eq!(w.clock, 1);
        for (a, b) in w.agents.iter().zip(&before.agents) {
            assert_eq!(a.pos, b.pos);
        }
        for (v, b) in w.victims.iter().zip(&before.victims) {
            assert!((b.health - v.health - 0.002).abs() < 1e-15);
        }
    }

    #[test]
    fn drop_off_at_muster_rescues() {
        let s = ScenarioConfig::default();
        let mut w = world(&s);
        w.victims[0].health = 0.5;
        w.victims[0].status = VictimStatus::Carried(1);
        w.victims[0].pos = w.agents[1].pos;
        w.agents[1].carrying = Some(0);
        let mut acts = [PrimitiveAction::Stay; 4];
        acts[1] = PrimitiveAction::DropOff;
        let ev = simulate_primitive_step(&mut w, &s, &acts).unwrap();
        assert_eq!(ev, vec![RewardEvent { t: 0, r: 1.0 }]);
        assert_eq!(w.victims[0].health, 1.0);
        assert_eq!(w.victims[0].status, VictimStatus::Rescued);
        assert_eq!(w.agents[1].carrying, None);
    }

    #[test]
    fn victim_dies_on_the_second_step() {
        let s = ScenarioConfig::default();
        let mut w = world(&s);
        w.victims.truncate(1);
        w.victims[0].health = 0.004;
        let first = simulate_primitive_step(&mut w, &s, &[PrimitiveAction::Stay; 4]).unwrap();
        assert!(first.is_empty());
        let second = simulate_primitive_step(&mut w, &s, &[PrimitiveAction::Stay; 4]).unwrap();
        assert_eq!(second, vec![RewardEvent { t: 1, r: -1.0 }]);
        assert_eq!(w.clock, 2);
        assert_eq!(w.victims[0].status, VictimStatus::Dead);
        let third = simulate_primitive_step(&mut w, &s, &[PrimitiveAction::Stay; 4]).unwrap();
        assert!(third.is_empty());
    }

    #[test]
    fn aerial_agent_cannot_pick_up() {
        let s = ScenarioConfig::default();
        let mut w = world(&s);
        let mut acts = [PrimitiveAction::Stay; 4];
        acts[0] = PrimitiveAction::PickUp(0);
        assert!(matches!(simulate_primitive_step(&mut w, &s, &acts), Err(Error::Contract(_))));
    }

    #[test]
    fn speeds_are_enforced() {
        let s = ScenarioConfig::default();
        let mut w = world(&s);
        let mut acts = [PrimitiveAction::Stay; 4];
        acts[1] = PrimitiveAction::Move(Cell::new(w.agents[1].pos.x + 2, w.agents[1].pos.y));
        assert!(simulate_primitive_step(&mut w.clone(), &s, &acts).is_err());
        acts[1] = PrimitiveAction::Stay;
        acts[0] = PrimitiveAction::Move(Cell::new(5, 5));
        simulate_primitive_step(&mut w, &s, &acts).unwrap();
        assert_eq!(w.agents[0].pos, Cell::new(5, 5));
    }
}
