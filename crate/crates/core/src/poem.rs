//! Batch EM over joint controllers.
//!
//! Every reward event `e` of episode `k` contributes a mixture component with
//! weight `r~_e = gamma^x (r - r_min) / prod_n b_n(prefix)`, where `b_n` is the
//! behavior likelihood of agent `n`'s decisions started at or before the reward.
//! The E-step computes `sigma_e = r~_e * prod_n p(prefix_n | theta~)` and, per
//! agent, the posterior over controller nodes along its own decision prefix.
//! The M-step re-estimates every row by normalized expected counts.
//!
//! Weights are kept relative to the largest `ln sigma` in the dataset
//! (`log_scale`), so `w_e = exp(ln sigma_e - log_scale)` lies in `[0, 1]`.
//!
//! Backward messages are aggregated over events: with `g_i` the total weight
//! of events whose last decision is `i`,
//!
//! ```text
//! B_last = g_last
//! B_i(q) = g_i + sum_q' delta(q, o_{i+1}, q') lambda(q', o_{i+1}, m_{i+1}) B_{i+1}(q') / c_{i+1}
//! ```
//!
//! so `alpha_i * B_i` is the weighted node-count at decision `i` and sums to the
//! weight of events that reach it.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{event_terms, Episode, LearnConfig};
use crate::error::{Error, Result};
use crate::fsc::{forward, FscParams, JointFsc};
use crate::stats::pairwise_sum;

/// Additive probability floor applied in the M-step.
pub const PROB_FLOOR: f64 = 1e-12;

/// Posterior quantities for one agent in one episode.
#[derive(Clone, Debug)]
pub struct AgentBuffers {
    pub agent_id: usize,
    pub num_nodes: usize,
    /// Filtered node posteriors, decision-major.
    pub alpha: Vec<f64>,
    pub log_norm: Vec<f64>,
    /// Aggregated backward messages `B_i`.
    pub beta: Vec<f64>,
    /// Total event weight reaching each decision.
    pub mass: Vec<f64>,
    /// Normalized node marginals per decision.
    pub phi: Vec<f64>,
    /// Normalized pairwise posteriors for transitions `i-1 -> i`, `i >= 1`.
    pub xi: Vec<f64>,
}

impl AgentBuffers {
    pub fn len(&self) -> usize {
        self.log_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_norm.is_empty()
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        let q = self.num_nodes;
        &self.phi[i * q..(i + 1) * q]
    }

    /// `xi(i)[a * Q + b]` is the posterior of `(q_{i-1}, q_i) = (a, b)`; `i >= 1`.
    pub fn xi(&self, i: usize) -> &[f64] {
        let q2 = self.num_nodes * self.num_nodes;
        &self.xi[(i - 1) * q2..i * q2]
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeBuffers {
    pub agents: Vec<AgentBuffers>,
    /// `ln r~` per reward event (`-inf` when `r = r_min`).
    pub log_rtilde: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EStepBuffers {
    pub episodes: Vec<EpisodeBuffers>,
    pub r_min: f64,
    pub log_scale: f64,
    /// `sum_e exp(ln sigma_e - log_scale)`.
    pub scaled_mass: f64,
    pub lower_bound: f64,
}

impl EStepBuffers {
    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// `sigma` of every event, in episode order.
    pub fn sigma(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .flat_map(|e| e.log_sigma.iter().map(|l| l.exp()))
            .collect()
    }

    pub fn has_mass(&self) -> bool {
        self.scaled_mass > 0.0
    }
}

fn numeric(episode: usize, agent: usize, step: usize, what: &'static str) -> Error {
    Error::Numeric {
        episode,
        agent,
        step,
        what,
    }
}

fn lookup<'a>(theta: &'a JointFsc, agent_id: usize) -> Result<&'a FscParams> {
    theta
        .get(agent_id)
        .ok_or_else(|| Error::Mismatch(format!("no controller for agent {agent_id}")))
}

struct Forward {
    alpha: Vec<Vec<f64>>,
    log_norm: Vec<Vec<f64>>,
    log_rtilde: Vec<f64>,
    log_sigma: Vec<f64>,
    last: Vec<Vec<usize>>,
}

fn forward_episode(k: usize, ep: &Episode, theta: &JointFsc, cfg: &LearnConfig, r_min: f64) -> Result<Forward> {
    let mut alpha = Vec::with_capacity(ep.agents.len());
    let mut log_norm = Vec::with_capacity(ep.agents.len());
    let mut log_lik = Vec::with_capacity(ep.agents.len());
    let mut log_beh = Vec::with_capacity(ep.agents.len());
    for (n, a) in ep.agents.iter().enumerate() {
        let params = lookup(theta, a.agent_id)?;
        let fp = forward(params, &a.actions(), &a.observations())?;
        if let Some(i) = fp.log_norm.iter().position(|c| !c.is_finite()) {
            return Err(numeric(k, n, i, "action likelihood"));
        }
        log_lik.push(fp.log_prefix());
        log_beh.push(a.log_behavior_prefix());
        alpha.push(fp.alpha);
        log_norm.push(fp.log_norm);
    }
    let terms = event_terms(ep, cfg);
    let mut log_rtilde = Vec::with_capacity(terms.len());
    let mut log_sigma = Vec::with_capacity(terms.len());
    let mut last = Vec::with_capacity(terms.len());
    for e in terms {
        let shifted = e.reward - r_min;
        let (lr, ls) = if shifted > 0.0 && e.discount > 0.0 {
            let beh: f64 = e.last.iter().zip(&log_beh).map(|(&j, b)| b[j]).sum();
            let lik: f64 = e.last.iter().zip(&log_lik).map(|(&j, l)| l[j]).sum();
            let lr = e.discount.ln() + shifted.ln() - beh;
            (lr, lr + lik)
        } else {
            (f64::NEG_INFINITY, f64::NEG_INFINITY)
        };
        if lr.is_nan() || ls.is_nan() || ls == f64::INFINITY {
            return Err(numeric(k, 0, e.last[0], "reweighted reward"));
        }
        log_rtilde.push(lr);
        log_sigma.push(ls);
        last.push(e.last);
    }
    Ok(Forward {
        alpha,
        log_norm,
        log_rtilde,
        log_sigma,
        last,
    })
}

fn backward_agent(
    k: usize,
    n: usize,
    params: &FscParams,
    ep: &Episode,
    alpha: Vec<f64>,
    log_norm: Vec<f64>,
    g: Vec<f64>,
) -> Result<AgentBuffers> {
    let traj = &ep.agents[n];
    let nq = params.num_nodes();
    let len = log_norm.len();
    let mut beta = vec![0.0; len * nq];
    let mut mass = vec![0.0; len];
    let mut acc = 0.0;
    for i in (0..len).rev() {
        acc += g[i];
        mass[i] = acc;
    }
    beta[(len - 1) * nq..].iter_mut().for_each(|b| *b = g[len - 1]);
    for i in (0..len - 1).rev() {
        let o = traj.decisions[i + 1].obs.unwrap_or(0);
        let m = traj.decisions[i + 1].action;
        let c = log_norm[i + 1].exp();
        let (head, tail) = beta.split_at_mut((i + 1) * nq);
        let next = &tail[..nq];
        let cur = &mut head[i * nq..];
        for (q, b) in cur.iter_mut().enumerate() {
            let mut s = 0.0;
            for (q2, &d) in params.delta_row(q, o).iter().enumerate() {
                s += d * params.lambda_row(q2, o)[m] * next[q2];
            }
            *b = g[i] + s / c;
        }
        if cur.iter().any(|b| !b.is_finite()) {
            return Err(numeric(k, n, i, "backward message"));
        }
    }

    let mut phi = vec![0.0; len * nq];
    for i in 0..len {
        let a = &alpha[i * nq..(i + 1) * nq];
        let out = &mut phi[i * nq..(i + 1) * nq];
        if mass[i] > 0.0 {
            let b = &beta[i * nq..(i + 1) * nq];
            for q in 0..nq {
                out[q] = a[q] * b[q] / mass[i];
            }
        } else {
            out.copy_from_slice(a);
        }
    }

    let q2 = nq * nq;
    let mut xi = vec![0.0; len.saturating_sub(1) * q2];
    for i in 1..len {
        let o = traj.decisions[i].obs.unwrap_or(0);
        let m = traj.decisions[i].action;
        let c = log_norm[i].exp();
        let prev = &alpha[(i - 1) * nq..i * nq];
        let out = &mut xi[(i - 1) * q2..i * q2];
        let weight: Option<&[f64]> = (mass[i] > 0.0).then(|| &beta[i * nq..(i + 1) * nq]);
        for qa in 0..nq {
            let d = params.delta_row(qa, o);
            for qb in 0..nq {
                let base = prev[qa] * d[qb] * params.lambda_row(qb, o)[m] / c;
                out[qa * nq + qb] = match weight {
                    Some(b) => base * b[qb] / mass[i],
                    None => base,
                };
            }
        }
    }

    Ok(AgentBuffers {
        agent_id: traj.agent_id,
        num_nodes: nq,
        alpha,
        log_norm,
        beta,
        mass,
        phi,
        xi,
    })
}

/// Posterior computation and the value of the bound at `theta` itself.
///
/// Returns the buffers and `lb(theta | theta) = K ln(S / K)` with `S` the total
/// `sigma`. When every `sigma` is zero the bound is reported as 0.
pub fn e_step(theta: &JointFsc, data: &[Episode], cfg: &LearnConfig) -> Result<(EStepBuffers, f64)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no training episodes".into()));
    }
    let r_min = cfg.resolve_r_min(data);
    let fwd = data
        .par_iter()
        .enumerate()
        .map(|(k, ep)| forward_episode(k, ep, theta, cfg, r_min))
        .collect::<Result<Vec<_>>>()?;

    let log_scale = fwd
        .iter()
        .flat_map(|f| f.log_sigma.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let weight = |ls: f64| {
        if log_scale == f64::NEG_INFINITY {
            0.0
        } else {
            (ls - log_scale).exp()
        }
    };

    let episodes = fwd
        .into_par_iter()
        .enumerate()
        .map(|(k, f)| {
            let ep = &data[k];
            let w: Vec<f64> = f.log_sigma.iter().map(|&ls| weight(ls)).collect();
            let mut agents = Vec::with_capacity(ep.agents.len());
            for (n, (alpha, log_norm)) in f.alpha.into_iter().zip(f.log_norm).enumerate() {
                let mut g = vec![0.0; log_norm.len()];
                for (e, last) in f.last.iter().enumerate() {
                    g[last[n]] += w[e];
                }
                let params = lookup(theta, ep.agents[n].agent_id)?;
                agents.push(backward_agent(k, n, params, ep, alpha, log_norm, g)?);
            }
            Ok(EpisodeBuffers {
                agents,
                log_rtilde: f.log_rtilde,
                log_sigma: f.log_sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_episode: Vec<f64> = episodes
        .iter()
        .map(|e| pairwise_sum(&e.log_sigma.iter().map(|&l| weight(l)).collect::<Vec<_>>()))
        .collect();
    let scaled_mass = pairwise_sum(&per_episode);
    let k = data.len() as f64;
    let lower_bound = if scaled_mass > 0.0 {
        k * (log_scale + scaled_mass.ln() - k.ln())
    } else {
        0.0
    };
    if !lower_bound.is_finite() {
        return Err(numeric(0, 0, 0, "lower bound"));
    }
    let buffers = EStepBuffers {
        episodes,
        r_min,
        log_scale,
        scaled_mass,
        lower_bound,
    };
    Ok((buffers, lower_bound))
}

/// Weighted expected counts, laid out like the agent's parameters.
#[derive(Clone, Debug)]
struct Counts {
    mu: Vec<f64>,
    lambda0: Vec<f64>,
    lambda: Vec<f64>,
    delta: Vec<f64>,
}

fn expected_counts(buffers: &EStepBuffers, theta: &JointFsc, data: &[Episode]) -> Result<Vec<Counts>> {
    if buffers.episodes.len() != data.len() {
        return Err(Error::Contract(format!(
            "buffers cover {} episodes, data has {}",
            buffers.episodes.len(),
            data.len()
        )));
    }
    let mut counts: Vec<Counts> = theta
        .agents()
        .iter()
        .map(|p| Counts {
            mu: vec![0.0; p.mu.len()],
            lambda0: vec![0.0; p.lambda0.len()],
            lambda: vec![0.0; p.lambda.len()],
            delta: vec![0.0; p.delta.len()],
        })
        .collect();
    for (k, (eb, ep)) in buffers.episodes.iter().zip(data).enumerate() {
        if eb.agents.len() != ep.agents.len() {
            return Err(Error::Contract(format!("episode {k}: agent count differs from buffers")));
        }
        for (ab, traj) in eb.agents.iter().zip(&ep.agents) {
            let idx = theta
                .agents()
                .iter()
                .position(|p| p.spec().agent_id == traj.agent_id)
                .ok_or_else(|| Error::Mismatch(format!("no controller for agent {}", traj.agent_id)))?;
            let p = &theta.agents()[idx];
            let (nq, no, nm) = (p.num_nodes(), p.num_observations(), p.num_actions());
            if ab.num_nodes != nq || ab.len() != traj.decisions.len() {
                return Err(Error::Contract(format!(
                    "episode {k}, agent {}: buffer shape does not match parameters",
                    traj.agent_id
                )));
            }
            let c = &mut counts[idx];
            for (i, d) in traj.decisions.iter().enumerate() {
                let mass = ab.mass[i];
                if mass == 0.0 {
                    continue;
                }
                let phi = ab.phi(i);
                if i == 0 {
                    for q in 0..nq {
                        let w = phi[q] * mass;
                        c.mu[q] += w;
                        c.lambda0[q * nm + d.action] += w;
                    }
                } else {
                    let o = d.obs.unwrap_or(0);
                    for q in 0..nq {
                        c.lambda[(q * no + o) * nm + d.action] += phi[q] * mass;
                    }
                    let xi = ab.xi(i);
                    for qa in 0..nq {
                        let base = (qa * no + o) * nq;
                        for qb in 0..nq {
                            c.delta[base + qb] += xi[qa * nq + qb] * mass;
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

fn normalize_rows(counts: &[f64], prior: &[f64], width: usize, out: &mut Vec<f64>) {
    out.clear();
    let n = width as f64;
    for (row, old) in counts.chunks(width).zip(prior.chunks(width)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            out.extend(row.iter().map(|c| (c / s + PROB_FLOOR) / (1.0 + n * PROB_FLOOR)));
        } else {
            out.extend_from_slice(old);
        }
    }
}

/// Closed-form re-estimation of every row from the E-step counts.
///
/// Rows with no accumulated weight are copied from `theta_tilde`.
pub fn m_step(buffers: &EStepBuffers, theta_tilde: &JointFsc, data: &[Episode]) -> Result<JointFsc> {
    let counts = expected_counts(buffers, theta_tilde, data)?;
    let mut theta = theta_tilde.clone();
    for (p, c) in theta.agents_mut().iter_mut().zip(&counts) {
        let (nq, nm) = (p.num_nodes(), p.num_actions());
        let mut buf = Vec::new();
        normalize_rows(&c.mu, &p.mu, nq, &mut buf);
        p.mu.copy_from_slice(&buf);
        normalize_rows(&c.lambda0, &p.lambda0, nm, &mut buf);
        p.lambda0.copy_from_slice(&buf);
        normalize_rows(&c.lambda, &p.lambda, nm, &mut buf);
        p.lambda.copy_from_slice(&buf);
        normalize_rows(&c.delta, &p.delta, nq, &mut buf);
        p.delta.copy_from_slice(&buf);
    }
    Ok(theta)
}

fn weighted_log_params(counts: &[Counts], theta: &JointFsc) -> f64 {
    let mut terms = Vec::new();
    for (c, p) in counts.iter().zip(theta.agents()) {
        for (cs, ps) in [
            (&c.mu, &p.mu),
            (&c.lambda0, &p.lambda0),
            (&c.lambda, &p.lambda),
            (&c.delta, &p.delta),
        ] {
            terms.extend(
                cs.iter()
                    .zip(ps.iter())
                    .filter(|(c, _)| **c > 0.0)
                    .map(|(c, p)| c * p.ln()),
            );
        }
    }
    pairwise_sum(&terms)
}

/// `lb(theta | theta~)` for buffers computed at `theta_tilde`.
pub fn lower_bound(buffers: &EStepBuffers, theta_tilde: &JointFsc, theta: &JointFsc, data: &[Episode]) -> Result<f64> {
    if !buffers.has_mass() {
        return Ok(buffers.lower_bound);
    }
    if theta.specs() != theta_tilde.specs() {
        return Err(Error::Contract("parameter shapes differ".into()));
    }
    let counts = expected_counts(buffers, theta_tilde, data)?;
    let diff = weighted_log_params(&counts, theta) - weighted_log_params(&counts, theta_tilde);
    Ok(buffers.lower_bound + data.len() as f64 / buffers.scaled_mass * diff)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoemConfig {
    /// Stop once the relative lower-bound gain falls below this.
    pub tol: f64,
    pub max_inner: usize,
}

impl Default for PoemConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_inner: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub lower_bound_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub r_min_used: f64,
}

impl TrainStats {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "lower_bound"]).map_err(csv_err)?;
        for (i, lb) in self.lower_bound_trace.iter().enumerate() {
            w.write_record([(i + 1).to_string(), lb.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Relative gain used by the stopping rule; the scale is floored at one nat per episode.
pub fn relative_gain(prev: f64, cur: f64, num_episodes: usize) -> f64 {
    (cur - prev) / prev.abs().max(num_episodes as f64)
}

/// Alternate E- and M-steps from `theta_init`.
///
/// Each iteration records `lb(theta | theta)` for the current iterate, stops if
/// the relative gain over the previous one is below `opts.tol`, and otherwise
/// re-estimates. If no event carries weight the parameters are returned as is.
pub fn poem_train(
    theta_init: &JointFsc,
    data: &[Episode],
    cfg: &LearnConfig,
    opts: &PoemConfig,
) -> Result<(JointFsc, TrainStats)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no training episodes".into()));
    }
    let mut stats = TrainStats {
        r_min_used: cfg.resolve_r_min(data),
        ..TrainStats::default()
    };
    let mut theta = theta_init.clone();
    for _ in 0..opts.max_inner {
        let (buffers, lb) = e_step(&theta, data, cfg)?;
        stats.iterations_run += 1;
        stats.lower_bound_trace.push(lb);
        if !buffers.has_mass() {
            stats.converged = true;
            break;
        }
        if let [.., prev, cur] = stats.lower_bound_trace[..] {
            if relative_gain(prev, cur, data.len()) < opts.tol {
                stats.converged = true;
                break;
            }
        }
        theta = m_step(&buffers, &theta, data)?;
    }
    Ok((theta, stats))
}
