//! Macro-actions and their primitive controllers.
//!
//! Macro ids: `GoToSite(i)` is `i - 1` for site ids `1..=s`; `PickUp` is `s`
//! and exists only for ground vehicles.

use rand::Rng;

use super::scenario::{AgentKind, Cell, ScenarioConfig};
use super::world::{PrimitiveAction, WorldState};
use crate::error::{Error, Result};

/// Wall-following steps tolerated before a random move.
pub const MAX_BLOCKED_STEPS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroAction {
    GoToSite(usize),
    PickUp,
}

impl MacroAction {
    pub fn from_index(index: usize, kind: AgentKind, num_sites: usize) -> Result<Self> {
        match index {
            i if i < num_sites => Ok(Self::GoToSite(i + 1)),
            i if i == num_sites && kind == AgentKind::Ugv => Ok(Self::PickUp),
            _ => Err(Error::Domain(format!("macro index {index} out of range for {kind:?}"))),
        }
    }

    pub fn index(self, num_sites: usize) -> usize {
        match self {
            Self::GoToSite(i) => i - 1,
            Self::PickUp => num_sites,
        }
    }
}

/// Which macros the agent may start right now.
pub fn initiable(world: &WorldState, scenario: &ScenarioConfig, agent: usize) -> Vec<bool> {
    let a = &world.agents[agent];
    let mut mask = vec![true; scenario.num_actions(a.kind)];
    if a.kind == AgentKind::Ugv {
        mask[scenario.num_sites()] = scenario.site_of(a.pos).is_some();
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    E,
    N,
    W,
    S,
}

impl Dir {
    const ALL: [Dir; 4] = [Dir::E, Dir::N, Dir::W, Dir::S];

    fn delta(self) -> (i32, i32) {
        match self {
            Dir::E => (1, 0),
            Dir::N => (0, 1),
            Dir::W => (-1, 0),
            Dir::S => (0, -1),
        }
    }

    fn left(self) -> Dir {
        match self {
            Dir::E => Dir::N,
            Dir::N => Dir::W,
            Dir::W => Dir::S,
            Dir::S => Dir::E,
        }
    }

    fn right(self) -> Dir {
        self.left().left().left()
    }

    fn back(self) -> Dir {
        self.left().left()
    }

    fn apply(self, c: Cell) -> Cell {
        let (dx, dy) = self.delta();
        Cell::new(c.x + dx, c.y + dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NavMode {
    Greedy,
    Wall { heading: Dir, start_dist: i32 },
}

/// Ground navigation memory: greedy descent with right-hand wall following.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NavState {
    mode: NavMode,
    blocked_steps: u32,
    best_dist: i32,
    since_progress: u32,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            mode: NavMode::Greedy,
            blocked_steps: 0,
            best_dist: i32::MAX,
            since_progress: 0,
        }
    }
}

fn free(scenario: &ScenarioConfig, c: Cell) -> bool {
    scenario.in_grid(c) && !scenario.is_obstacle(c)
}

/// Directions that reduce the distance to `target`, larger axis first (x on ties).
fn greedy_dirs(from: Cell, target: Cell) -> Vec<Dir> {
    let (dx, dy) = (target.x - from.x, target.y - from.y);
    let hx = if dx > 0 { Dir::E } else { Dir::W };
    let hy = if dy > 0 { Dir::N } else { Dir::S };
    let mut out = Vec::with_capacity(2);
    if dx.abs() >= dy.abs() {
        if dx != 0 {
            out.push(hx);
        }
        if dy != 0 {
            out.push(hy);
        }
    } else {
        out.push(hy);
        if dx != 0 {
            out.push(hx);
        }
    }
    out
}

fn random_move<R: Rng + ?Sized>(scenario: &ScenarioConfig, from: Cell, rng: &mut R) -> Cell {
    let opts: Vec<Cell> = Dir::ALL.iter().map(|d| d.apply(from)).filter(|&c| free(scenario, c)).collect();
    if opts.is_empty() {
        from
    } else {
        opts[rng.random_range(0..opts.len())]
    }
}

/// One ground step toward `target`.
pub fn ugv_next<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    nav: &mut NavState,
    from: Cell,
    target: Cell,
    rng: &mut R,
) -> Cell {
    let dist = from.manhattan(target);
    if dist == 0 {
        return from;
    }
    if dist < nav.best_dist {
        nav.best_dist = dist;
        nav.since_progress = 0;
    } else {
        nav.since_progress += 1;
    }
    let patience = 2 * (scenario.width + scenario.height) as u32;
    if nav.since_progress > patience || nav.blocked_steps > MAX_BLOCKED_STEPS {
        *nav = NavState {
            best_dist: dist,
            ..NavState::default()
        };
        return random_move(scenario, from, rng);
    }

    let greedy = greedy_dirs(from, target);
    let open_greedy = greedy.iter().copied().find(|d| free(scenario, d.apply(from)));
    match nav.mode {
        NavMode::Greedy => {
            if let Some(d) = open_greedy {
                return d.apply(from);
            }
            nav.mode = NavMode::Wall {
                heading: greedy[0].left(),
                start_dist: dist,
            };
        }
        NavMode::Wall { start_dist, .. } => {
            if dist < start_dist {
                if let Some(d) = open_greedy {
                    nav.mode = NavMode::Greedy;
                    nav.blocked_steps = 0;
                    return d.apply(from);
                }
            }
        }
    }
    let NavMode::Wall { heading, start_dist } = nav.mode else {
        unreachable!("wall mode set above");
    };
    nav.blocked_steps += 1;
    for d in [heading.right(), heading, heading.left(), heading.back()] {
        let next = d.apply(from);
        if free(scenario, next) {
            nav.mode = NavMode::Wall { heading: d, start_dist };
            return next;
        }
    }
    from
}

/// One aerial step: up to `speed` cells along each axis, ignoring obstacles.
pub fn uav_next(scenario: &ScenarioConfig, from: Cell, target: Cell) -> Cell {
    let s = scenario.uav_speed;
    Cell::new(
        from.x + (target.x - from.x).clamp(-s, s),
        from.y + (target.y - from.y).clamp(-s, s),
    )
}

/// A macro-action in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroExec {
    pub action: MacroAction,
    pub started_at: u64,
    /// Site a pick-up works on, fixed when it starts.
    pub site: Option<usize>,
    pub nav: NavState,
}

impl MacroExec {
    /// Start `action` for `agent`, checking its initiation condition.
    pub fn start(world: &WorldState, scenario: &ScenarioConfig, agent: usize, action: MacroAction) -> Result<Self> {
        let a = &world.agents[agent];
        let site = match action {
            MacroAction::GoToSite(i) => {
                if i == 0 || i > scenario.num_sites() {
                    return Err(Error::Domain(format!("no site {i}")));
                }
                None
            }
            MacroAction::PickUp => {
                let here = scenario.site_of(a.pos);
                if a.kind != AgentKind::Ugv || here.is_none() {
                    return Err(Error::NotInitiable {
                        agent,
                        macro_id: action.index(scenario.num_sites()),
                    });
                }
                here
            }
        };
        Ok(Self {
            action,
            started_at: world.clock,
            site,
            nav: NavState::default(),
        })
    }
}

/// Primitive action for this step, or `(Stay, true)` once the macro has terminated.
pub fn run_macro_decision<R: Rng + ?Sized>(
    world: &WorldState,
    scenario: &ScenarioConfig,
    agent: usize,
    exec: &mut MacroExec,
    rng: &mut R,
) -> Result<(PrimitiveAction, bool)> {
    let a = &world.agents[agent];
    if world.clock - exec.started_at >= scenario.macro_timeout {
        return Ok((PrimitiveAction::Stay, true));
    }
    let step_toward = |exec: &mut MacroExec, target: Cell, rng: &mut R| match a.kind {
        AgentKind::Uav => uav_next(scenario, a.pos, target),
        AgentKind::Ugv => ugv_next(scenario, &mut exec.nav, a.pos, target, rng),
    };
    match exec.action {
        MacroAction::GoToSite(i) => {
            let rect = *scenario.site(i);
            if rect.contains(a.pos) {
                if i == 1 && a.carrying.is_some() {
                    return Ok((PrimitiveAction::DropOff, false));
                }
                return Ok((PrimitiveAction::Stay, true));
            }
            let next = step_toward(exec, rect.clamp(a.pos), rng);
            Ok((PrimitiveAction::Move(next), false))
        }
        MacroAction::PickUp => {
            let site = exec.site.expect("pick-up keeps its site");
            if a.carrying.is_some() {
                return Ok((PrimitiveAction::Stay, true));
            }
            let target = world
                .victims_at_site(scenario, site)
                .min_by(|x, y| x.health.total_cmp(&y.health).then(x.id.cmp(&y.id)));
            let Some(v) = target else {
                return Ok((PrimitiveAction::Stay, true));
            };
            if v.pos == a.pos {
                return Ok((PrimitiveAction::PickUp(v.id), false));
            }
            let next = step_toward(exec, v.pos, rng);
            Ok((PrimitiveAction::Move(next), false))
        }
    }
}
