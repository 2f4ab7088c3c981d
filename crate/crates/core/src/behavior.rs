//! Expert heuristic, the expert/random mixture used to collect data, and
//! batch dataset generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::rng::{tag, SimRng};
use crate::sim::macros::MacroAction;
use crate::sim::observe::Knowledge;
use crate::sim::runner::{rollout_with, DecisionContext, TeamPolicy};
use crate::sim::scenario::{AgentKind, ScenarioConfig};
use crate::sim::world::AgentState;

/// Hand-coded macro choice from the agent's own knowledge.
///
/// A carrying UGV heads to the muster; a UGV standing in a site believed to
/// hold victims picks up; otherwise a UGV goes to the most urgent site known
/// to hold victims (critical first, then the oldest report, then lowest id)
/// and explores like a UAV when none is known. A UAV visits unvisited sites
/// first, then the stalest.
pub fn expert_action(knowledge: &Knowledge, agent: &AgentState, scenario: &ScenarioConfig) -> usize {
    let s = scenario.num_sites();
    let here = scenario.site_of(agent.pos);
    if agent.kind == AgentKind::Ugv {
        if agent.carrying.is_some() {
            return MacroAction::GoToSite(1).index(s);
        }
        if let Some(h) = here {
            if h != 1 && knowledge.site(h).status > 0 {
                return MacroAction::PickUp.index(s);
            }
        }
        let urgent = (2..=s).filter(|&id| knowledge.site(id).status > 0).min_by_key(|&id| {
            let k = knowledge.site(id);
            (std::cmp::Reverse(k.status), k.observed_at, id)
        });
        if let Some(id) = urgent {
            return MacroAction::GoToSite(id).index(s);
        }
    }
    let stalest = (2..=s)
        .filter(|&id| Some(id) != here)
        .min_by_key(|&id| (knowledge.site(id).observed_at, id))
        .unwrap_or(1);
    MacroAction::GoToSite(stalest).index(s)
}

/// With probability `rho` take the expert macro, otherwise a uniform draw
/// over the initiable macros. Returns the macro and its exact mixture mass.
pub fn mixture_decision<R: Rng + ?Sized>(expert: usize, initiable: &[bool], rho: f64, rng: &mut R) -> Result<(usize, f64)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho must lie in [0, 1), got {rho}")));
    }
    let allowed: Vec<usize> = (0..initiable.len()).filter(|&m| initiable[m]).collect();
    if allowed.is_empty() {
        return Err(Error::Contract("no initiable macro".into()));
    }
    if expert >= initiable.len() || !initiable[expert] {
        return Err(Error::Contract(format!("expert macro {expert} is not initiable")));
    }
    let u: f64 = rng.random();
    let m = if u < rho {
        expert
    } else {
        allowed[rng.random_range(0..allowed.len())]
    };
    let uniform = (1.0 - rho) / allowed.len() as f64;
    let p = if m == expert { rho + uniform } else { uniform };
    Ok((m, p))
}

/// The behavior policy: expert with probability `rho`, random otherwise.
#[derive(Clone, Copy, Debug)]
pub struct MixturePolicy {
    pub rho: f64,
}

impl TeamPolicy for MixturePolicy {
    fn reset(&mut self, _scenario: &ScenarioConfig) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<(usize, f64)> {
        let expert = expert_action(ctx.knowledge, &ctx.world.agents[ctx.agent], ctx.scenario);
        mixture_decision(expert, ctx.initiable, self.rho, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    /// Expert share in [0, 1).
    pub rho: f64,
    pub episodes: usize,
    pub master_seed: u64,
    pub scenario: ScenarioConfig,
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Validation(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        self.scenario.validate()
    }
}

/// Simulate `cfg.episodes` episodes under the mixture policy.
pub fn generate_dataset(cfg: &BehaviorConfig) -> Result<Vec<Episode>> {
    generate_with_tag(cfg, tag::EPISODE)
}

/// Same as [`generate_dataset`] on an independent family of RNG streams,
/// e.g. for held-out test data.
pub fn generate_with_tag(cfg: &BehaviorConfig, stream_tag: u64) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let rho = cfg.rho;
    let (outcomes, _) = rollout_with(&cfg.scenario, cfg.episodes, 1.0, cfg.master_seed, stream_tag, || MixturePolicy {
        rho,
    })?;
    Ok(outcomes.into_iter().map(|o| o.episode).collect())
}
