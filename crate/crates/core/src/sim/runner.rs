use rayon::prelude::*;
use serde::Serialize;

use super::macros::{initiable, run_macro_decision, MacroAction, MacroExec};
use super::observe::{build_observation, observe_and_communicate, Knowledge, ObservationVector};
use super::scenario::{AgentKind, ScenarioConfig};
use super::world::{simulate_primitive_step, PrimitiveAction, WorldState};
use crate::dataset::{AgentDecision, AgentTrajectory, Episode, RewardEvent};
use crate::error::{Error, Result};
use crate::fsc::{fsc_step_masked, FscRuntimeState, JointFsc};
use crate::rng::{stream, tag, SimRng};
use crate::stats::{mean, pairwise_sum};

/// Everything a team policy may look at when one agent picks a macro-action.
pub struct DecisionContext<'a> {
    pub agent: usize,
    pub kind: AgentKind,
    pub world: &'a WorldState,
    pub scenario: &'a ScenarioConfig,
    pub knowledge: &'a Knowledge,
    /// `None` for the agent's first decision.
    pub observation: Option<ObservationVector>,
    pub obs_index: Option<usize>,
    pub initiable: &'a [bool],
}

/// A decentralized team: one call per agent decision.
pub trait TeamPolicy {
    /// Called before each episode.
    fn reset(&mut self, scenario: &ScenarioConfig) -> Result<()>;
    /// Macro index and the probability the policy gave it.
    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<(usize, f64)>;
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub discounted_return: f64,
    pub undiscounted_return: f64,
}

/// Simulate one episode, logging every decision and reward.
///
/// Each step: sensing and communication, then every agent whose macro has
/// terminated picks a new one and runs its first primitive action. A macro
/// that terminates as soon as it starts leaves the agent idle for the step.
pub fn run_episode(
    scenario: &ScenarioConfig,
    policy: &mut dyn TeamPolicy,
    episode_id: u64,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<EpisodeOutcome> {
    let mut world = WorldState::new(scenario, rng)?;
    let n = world.agents.len();
    let s = scenario.num_sites();
    let mut knowledge = vec![Knowledge::new(s); n];
    let mut execs: Vec<Option<MacroExec>> = vec![None; n];
    let mut logs: Vec<Vec<AgentDecision>> = vec![Vec::new(); n];
    let mut rewards: Vec<RewardEvent> = Vec::new();
    policy.reset(scenario)?;

    while !world.all_resolved() && world.clock < scenario.max_steps {
        observe_and_communicate(&world, scenario, &mut knowledge, rng);
        let mut actions = vec![PrimitiveAction::Stay; n];
        for i in 0..n {
            if let Some(exec) = execs[i].as_mut() {
                let (act, done) = run_macro_decision(&world, scenario, i, exec, rng)?;
                if !done {
                    actions[i] = act;
                    continue;
                }
                execs[i] = None;
            }
            let first = logs[i].is_empty();
            let observation = (!first).then(|| build_observation(&knowledge[i], &world.agents[i], scenario));
            let obs_index = observation.map(|o| o.encode(s)).transpose()?;
            let mask = initiable(&world, scenario, i);
            let kind = world.agents[i].kind;
            let ctx = DecisionContext {
                agent: i,
                kind,
                world: &world,
                scenario,
                knowledge: &knowledge[i],
                observation,
                obs_index,
                initiable: &mask,
            };
            let (m, p) = policy.decide(&ctx, rng)?;
            if m >= mask.len() || !mask[m] {
                return Err(Error::NotInitiable { agent: i, macro_id: m });
            }
            logs[i].push(AgentDecision {
                start_step: world.clock,
                obs: obs_index,
                action: m,
                behavior_prob: p,
            });
            knowledge[i].last_decision_step = Some(world.clock);
            let mut exec = MacroExec::start(&world, scenario, i, MacroAction::from_index(m, kind, s)?)?;
            let (act, done) = run_macro_decision(&world, scenario, i, &mut exec, rng)?;
            if !done {
                actions[i] = act;
                execs[i] = Some(exec);
            }
        }
        rewards.extend(simulate_primitive_step(&mut world, scenario, &actions)?);
    }

    let discounted: Vec<f64> = rewards.iter().map(|e| gamma.powf(e.t as f64) * e.r).collect();
    let undiscounted_return = rewards.iter().map(|e| e.r).sum();
    let episode = Episode {
        episode_id,
        scenario_digest: scenario.digest(),
        length_steps: world.clock,
        agents: logs
            .into_iter()
            .enumerate()
            .map(|(agent_id, decisions)| AgentTrajectory { agent_id, decisions })
            .collect(),
        rewards,
    };
    Ok(EpisodeOutcome {
        episode,
        discounted_return: pairwise_sum(&discounted),
        undiscounted_return,
    })
}

/// Executes a joint controller, one runtime state per agent.
pub struct FscTeam<'a> {
    theta: &'a JointFsc,
    states: Vec<FscRuntimeState>,
}

impl<'a> FscTeam<'a> {
    pub fn new(theta: &'a JointFsc) -> Self {
        Self {
            theta,
            states: Vec::new(),
        }
    }
}

/// Check that a controller covers every agent with the scenario's alphabets.
pub fn check_alphabets(theta: &JointFsc, scenario: &ScenarioConfig) -> Result<()> {
    for (i, &kind) in scenario.agents.iter().enumerate() {
        let p = theta
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no controller for agent {i}")))?;
        if p.num_actions() != scenario.num_actions(kind) || p.num_observations() != scenario.num_observations() {
            return Err(Error::Contract(format!(
                "agent {i}: controller alphabets {}x{} do not match scenario {}x{}",
                p.num_actions(),
                p.num_observations(),
                scenario.num_actions(kind),
                scenario.num_observations()
            )));
        }
    }
    Ok(())
}

impl TeamPolicy for FscTeam<'_> {
    fn reset(&mut self, scenario: &ScenarioConfig) -> Result<()> {
        check_alphabets(self.theta, scenario)?;
        self.states = vec![FscRuntimeState::default(); scenario.agents.len()];
        Ok(())
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<(usize, f64)> {
        let params = self
            .theta
            .get(ctx.agent)
            .ok_or_else(|| Error::Contract(format!("no controller for agent {}", ctx.agent)))?;
        let (m, next, p) = fsc_step_masked(params, self.states[ctx.agent], ctx.obs_index, Some(ctx.initiable), rng)?;
        self.states[ctx.agent] = next;
        Ok((m, p))
    }
}

/// Scripted team with access to the true world state.
///
/// Ground vehicles deliver when carrying, pick up where victims remain and
/// otherwise head to the nearest site with victims. The aerial vehicle stays
/// at the muster.
#[derive(Clone, Copy, Debug, Default)]
pub struct OmniscientGreedy;

impl TeamPolicy for OmniscientGreedy {
    fn reset(&mut self, _scenario: &ScenarioConfig) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>, _rng: &mut SimRng) -> Result<(usize, f64)> {
        let s = ctx.scenario.num_sites();
        let a = &ctx.world.agents[ctx.agent];
        let muster = MacroAction::GoToSite(1).index(s);
        if a.kind == AgentKind::Uav || a.carrying.is_some() {
            return Ok((muster, 1.0));
        }
        if let Some(here) = ctx.scenario.site_of(a.pos) {
            if ctx.world.victims_at_site(ctx.scenario, here).next().is_some() {
                return Ok((MacroAction::PickUp.index(s), 1.0));
            }
        }
        let target = (2..=s)
            .filter(|&id| ctx.world.victims_at_site(ctx.scenario, id).next().is_some())
            .min_by_key(|&id| (ctx.scenario.site(id).clamp(a.pos).manhattan(a.pos), id));
        Ok((target.map_or(muster, |id| MacroAction::GoToSite(id).index(s)), 1.0))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutSummary {
    pub mean_discounted: f64,
    pub mean_undiscounted: f64,
    pub discounted: Vec<f64>,
    pub undiscounted: Vec<f64>,
}

/// Run `episodes` fresh episodes with teams built by `make`; episode `i` uses
/// the stream `(master_seed, stream_tag, i)`.
pub fn rollout_with<T, F>(
    scenario: &ScenarioConfig,
    episodes: usize,
    gamma: f64,
    master_seed: u64,
    stream_tag: u64,
    make: F,
) -> Result<(Vec<EpisodeOutcome>, RolloutSummary)>
where
    T: TeamPolicy,
    F: Fn() -> T + Sync,
{
    scenario.validate()?;
    let outcomes = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut team = make();
            let mut rng = stream(master_seed, &[stream_tag, i]);
            run_episode(scenario, &mut team, i, gamma, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let discounted: Vec<f64> = outcomes.iter().map(|o| o.discounted_return).collect();
    let undiscounted: Vec<f64> = outcomes.iter().map(|o| o.undiscounted_return).collect();
    let summary = RolloutSummary {
        mean_discounted: if episodes == 0 { 0.0 } else { mean(&discounted) },
        mean_undiscounted: if episodes == 0 { 0.0 } else { mean(&undiscounted) },
        discounted,
        undiscounted,
    };
    Ok((outcomes, summary))
}

/// Monte-Carlo returns of a joint controller.
pub fn rollout_evaluate(
    theta: &JointFsc,
    scenario: &ScenarioConfig,
    episodes: usize,
    gamma: f64,
    master_seed: u64,
) -> Result<RolloutSummary> {
    check_alphabets(theta, scenario)?;
    Ok(rollout_with(scenario, episodes, gamma, master_seed, tag::ROLLOUT, || FscTeam::new(theta))?.1)
}
