//! Episode records, the JSON-lines episode format, dataset splitting, and the
//! importance-weighted empirical value estimator.
//!
//! One episode is one line of JSON:
//!
//! ```text
//! {"episode_id":0,"scenario_digest":"…","length_steps":212,
//!  "agents":[{"agent_id":0,"decisions":[{"t":0,"obs":null,"ma":3,"p_behavior":0.87},…]},…],
//!  "rewards":[{"t":57,"r":1.0},…]}
//! ```
//!
//! `t` is the primitive step at which a decision starts or a reward is paid,
//! `obs` is the encoded macro-observation received before the decision (`null`
//! for the first decision), `ma` the macro-action index and `p_behavior` the
//! probability the data-collecting policy assigned to that macro-action.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsc::{log_prefix_likelihoods, JointFsc};
use crate::stats::pairwise_sum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    #[serde(rename = "t")]
    pub start_step: u64,
    pub obs: Option<usize>,
    #[serde(rename = "ma")]
    pub action: usize,
    #[serde(rename = "p_behavior")]
    pub behavior_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub agent_id: usize,
    pub decisions: Vec<AgentDecision>,
}

impl AgentTrajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.action).collect()
    }

    /// Observations received before decisions `1..`; validated episodes always have them.
    pub fn observations(&self) -> Vec<usize> {
        self.decisions[1..]
            .iter()
            .map(|d| d.obs.unwrap_or(0))
            .collect()
    }

    /// Index of the last decision started at or before `step`.
    pub fn last_decision_at(&self, step: u64) -> usize {
        self.decisions
            .partition_point(|d| d.start_step <= step)
            .saturating_sub(1)
    }

    /// Cumulative `ln` behavior probabilities.
    pub fn log_behavior_prefix(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.decisions
            .iter()
            .map(|d| {
                acc += d.behavior_prob.ln();
                acc
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    pub t: u64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: u64,
    pub scenario_digest: String,
    pub length_steps: u64,
    pub agents: Vec<AgentTrajectory>,
    pub rewards: Vec<RewardEvent>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let id = self.episode_id;
        let fail = |msg: String| Err(Error::Validation(format!("episode {id}: {msg}")));
        if self.agents.is_empty() {
            return fail("no agents".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if self.agents[..i].iter().any(|b| b.agent_id == a.agent_id) {
                return fail(format!("agent {} listed twice", a.agent_id));
            }
            let Some(first) = a.decisions.first() else {
                return fail(format!("agent {} has no decisions", a.agent_id));
            };
            if first.start_step != 0 {
                return fail(format!("agent {} first decision starts at {}", a.agent_id, first.start_step));
            }
            if first.obs.is_some() {
                return fail(format!("agent {} first decision carries an observation", a.agent_id));
            }
            for (j, d) in a.decisions.iter().enumerate() {
                if !(d.behavior_prob > 0.0 && d.behavior_prob <= 1.0) {
                    return fail(format!(
                        "agent {} decision {j} has behavior probability {}",
                        a.agent_id, d.behavior_prob
                    ));
                }
                if j > 0 {
                    if d.obs.is_none() {
                        return fail(format!("agent {} decision {j} has no observation", a.agent_id));
                    }
                    if d.start_step < a.decisions[j - 1].start_step {
                        return fail(format!("agent {} decisions out of order at {j}", a.agent_id));
                    }
                }
            }
        }
        for (j, e) in self.rewards.iter().enumerate() {
            if e.r != 1.0 && e.r != -1.0 {
                return fail(format!("reward {j} has value {}", e.r));
            }
            if j > 0 && e.t < self.rewards[j - 1].t {
                return fail(format!("rewards out of order at {j}"));
            }
        }
        Ok(())
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|e| e.r).sum()
    }
}

/// Write one episode per line.
pub fn write_episodes<W: Write>(episodes: &[Episode], mut out: W) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn episodes_to_bytes(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_episodes(episodes, &mut buf)?;
    Ok(buf)
}

/// Read and validate a JSON-lines episode file. Blank lines are skipped.
pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ep.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the serialized dataset.
pub fn dataset_digest(episodes: &[Episode]) -> Result<String> {
    Ok(sha256_hex(&episodes_to_bytes(episodes)?))
}

/// Shuffle, then cut off `floor(eval_fraction * n + 0.5)` episodes for evaluation.
///
/// The evaluation size is clamped to `1..=n-1` so neither side is empty. Both
/// halves keep the original episode order.
pub fn split_dataset<R: Rng + ?Sized>(
    episodes: &[Episode],
    eval_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let n = episodes.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("cannot split {n} episodes")));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Domain(format!("eval fraction {eval_fraction} outside (0, 1)")));
    }
    let n_eval = ((eval_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut is_eval = vec![false; n];
    for &i in &idx[..n_eval] {
        is_eval[i] = true;
    }
    let (mut train, mut eval) = (Vec::with_capacity(n - n_eval), Vec::with_capacity(n_eval));
    for (ep, e) in episodes.iter().zip(is_eval) {
        if e {
            eval.push(ep.clone());
        } else {
            train.push(ep.clone());
        }
    }
    Ok((train, eval))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum RMinPolicy {
    /// Smallest reward value present in the data.
    FromData,
    Explicit(f64),
}

/// Which clock the discount exponent counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discounting {
    /// `gamma^tau` with `tau` the primitive step of the reward.
    #[default]
    PrimitiveStep,
    /// `gamma^e` with `e` the number of distinct decision start steps before
    /// the reward, counted over all agents.
    DecisionEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub gamma: f64,
    pub r_min: RMinPolicy,
    pub discounting: Discounting,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            r_min: RMinPolicy::FromData,
            discounting: Discounting::PrimitiveStep,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Domain(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if let RMinPolicy::Explicit(r) = self.r_min {
            if !r.is_finite() {
                return Err(Error::Domain("r_min must be finite".into()));
            }
        }
        Ok(())
    }

    /// Resolve `r_min` against a dataset. Data without rewards gives 0.
    pub fn resolve_r_min(&self, episodes: &[Episode]) -> f64 {
        match self.r_min {
            RMinPolicy::Explicit(r) => r,
            RMinPolicy::FromData => episodes
                .iter()
                .flat_map(|e| e.rewards.iter().map(|r| r.r))
                .reduce(f64::min)
                .unwrap_or(0.0),
        }
    }
}

/// A reward event with the per-agent decision it is credited to.
#[derive(Clone, Debug)]
pub(crate) struct EventTerm {
    pub discount: f64,
    pub reward: f64,
    /// For each agent (episode order) the index of its last decision started at or before the reward.
    pub last: Vec<usize>,
}

pub(crate) fn event_terms(ep: &Episode, cfg: &LearnConfig) -> Vec<EventTerm> {
    let starts = match cfg.discounting {
        Discounting::PrimitiveStep => Vec::new(),
        Discounting::DecisionEpoch => {
            let mut s: Vec<u64> = ep
                .agents
                .iter()
                .flat_map(|a| a.decisions.iter().map(|d| d.start_step))
                .collect();
            s.sort_unstable();
            s.dedup();
            s
        }
    };
    ep.rewards
        .iter()
        .map(|e| {
            let exponent = match cfg.discounting {
                Discounting::PrimitiveStep => e.t as f64,
                Discounting::DecisionEpoch => (starts.partition_point(|&s| s <= e.t) - 1) as f64,
            };
            EventTerm {
                discount: cfg.gamma.powf(exponent),
                reward: e.r,
                last: ep.agents.iter().map(|a| a.last_decision_at(e.t)).collect(),
            }
        })
        .collect()
}

/// Anything that can score an agent's logged decisions.
pub trait TargetPolicy: Sync {
    /// `ln p(m_0..m_t | o_1..o_t)` for each prefix of the agent's decisions.
    fn log_prefix(&self, agent_id: usize, trajectory: &AgentTrajectory) -> Result<Vec<f64>>;
}

impl TargetPolicy for JointFsc {
    fn log_prefix(&self, agent_id: usize, trajectory: &AgentTrajectory) -> Result<Vec<f64>> {
        let params = self
            .get(agent_id)
            .ok_or_else(|| Error::Mismatch(format!("no controller for agent {agent_id}")))?;
        log_prefix_likelihoods(params, &trajectory.actions(), &trajectory.observations())
    }
}

/// The policy that produced the data, read back from the logged probabilities.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoggedBehavior;

impl TargetPolicy for LoggedBehavior {
    fn log_prefix(&self, _agent_id: usize, trajectory: &AgentTrajectory) -> Result<Vec<f64>> {
        Ok(trajectory.log_behavior_prefix())
    }
}

fn episode_value<P: TargetPolicy + ?Sized>(ep: &Episode, policy: &P, cfg: &LearnConfig) -> Result<f64> {
    if ep.rewards.is_empty() {
        return Ok(0.0);
    }
    let mut log_ratio = Vec::with_capacity(ep.agents.len());
    for a in &ep.agents {
        let target = policy.log_prefix(a.agent_id, a)?;
        let behavior = a.log_behavior_prefix();
        log_ratio.push(
            target
                .iter()
                .zip(&behavior)
                .map(|(t, b)| t - b)
                .collect::<Vec<_>>(),
        );
    }
    let terms: Vec<f64> = event_terms(ep, cfg)
        .into_iter()
        .map(|e| {
            let lw: f64 = e.last.iter().zip(&log_ratio).map(|(&j, r)| r[j]).sum();
            e.discount * e.reward * lw.exp()
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Importance-weighted estimate of the value of `policy` from behavior data.
///
/// Each reward is weighted by the product over agents of the likelihood ratio
/// of that agent's decisions started at or before the reward step.
pub fn empirical_value<P: TargetPolicy + ?Sized>(
    episodes: &[Episode],
    policy: &P,
    cfg: &LearnConfig,
) -> Result<f64> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let per_episode = episodes
        .par_iter()
        .map(|ep| episode_value(ep, policy, cfg))
        .collect::<Result<Vec<_>>>()?;
    let v = pairwise_sum(&per_episode) / episodes.len() as f64;
    if !v.is_finite() {
        return Err(Error::Numeric {
            episode: 0,
            agent: 0,
            step: 0,
            what: "empirical value",
        });
    }
    Ok(v)
}

/// Mean discounted return actually logged in the data.
pub fn mean_discounted_return(episodes: &[Episode], cfg: &LearnConfig) -> Result<f64> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let per: Vec<f64> = episodes
        .iter()
        .map(|ep| {
            let t: Vec<f64> = event_terms(ep, cfg)
                .iter()
                .map(|e| e.discount * e.reward)
                .collect();
            pairwise_sum(&t)
        })
        .collect();
    Ok(pairwise_sum(&per) / episodes.len() as f64)
}
