//! Stochastic Mealy finite-state controllers.
//!
//! A controller for one agent holds four row-stochastic tables over a node set
//! `Q`, an observation alphabet `O` and a macro-action alphabet `M`:
//!
//! - `mu[q]`: initial node distribution
//! - `lambda0[q][m]`: output law for the first decision, taken before any
//!   observation has been received
//! - `lambda[q][o][m]`: output law for later decisions
//! - `delta[q][o][q']`: node transition on receiving observation `o`
//!
//! Decision `0` draws `q0 ~ mu` and `m0 ~ lambda0(q0, .)`. Decision `i >= 1`
//! receives `o_i`, moves `q_i ~ delta(q_{i-1}, o_i, .)` and emits
//! `m_i ~ lambda(q_i, o_i, .)`. The likelihood recursions below follow the same
//! order, so the node sequence of an `n`-decision trajectory is `q_0..q_{n-1}`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{dirichlet_flat, sample_weighted};

/// Row-sum tolerance kept by every constructor and update.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Row-sum tolerance accepted when reading a policy file.
pub const FILE_SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub num_nodes: usize,
}

impl AgentSpec {
    pub fn new(agent_id: usize, num_actions: usize, num_observations: usize, num_nodes: usize) -> Self {
        Self {
            agent_id,
            num_actions,
            num_observations,
            num_nodes,
        }
    }

    pub fn with_nodes(mut self, num_nodes: usize) -> Self {
        self.num_nodes = num_nodes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_actions == 0 || self.num_observations == 0 || self.num_nodes == 0 {
            return Err(Error::InvalidSpec(format!(
                "agent {}: alphabet sizes must be >= 1 (actions {}, observations {}, nodes {})",
                self.agent_id, self.num_actions, self.num_observations, self.num_nodes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FscParams {
    spec: AgentSpec,
    pub(crate) mu: Vec<f64>,
    pub(crate) lambda0: Vec<f64>,
    pub(crate) lambda: Vec<f64>,
    pub(crate) delta: Vec<f64>,
}

fn rows_ok(data: &[f64], width: usize, tol: f64) -> std::result::Result<(), String> {
    for (r, row) in data.chunks(width).enumerate() {
        if let Some(bad) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(format!("row {r} has invalid entry {bad}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("row {r} sums to {s}"));
        }
    }
    Ok(())
}

fn renormalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

impl FscParams {
    /// Build from flat row-major tables, checking shapes and row sums.
    pub fn from_parts(
        spec: AgentSpec,
        mu: Vec<f64>,
        lambda0: Vec<f64>,
        lambda: Vec<f64>,
        delta: Vec<f64>,
    ) -> Result<Self> {
        Self::from_parts_with_tol(spec, mu, lambda0, lambda, delta, SIMPLEX_TOL)
    }

    fn from_parts_with_tol(
        spec: AgentSpec,
        mu: Vec<f64>,
        lambda0: Vec<f64>,
        lambda: Vec<f64>,
        delta: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let (q, o, m) = (spec.num_nodes, spec.num_observations, spec.num_actions);
        let shapes = [
            ("mu", mu.len(), q),
            ("lambda0", lambda0.len(), q * m),
            ("lambda", lambda.len(), q * o * m),
            ("delta", delta.len(), q * o * q),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Validation(format!(
                    "agent {}: {name} has {got} entries, expected {want}",
                    spec.agent_id
                )));
            }
        }
        for (name, data, width) in [
            ("mu", &mu, q),
            ("lambda0", &lambda0, m),
            ("lambda", &lambda, m),
            ("delta", &delta, q),
        ] {
            rows_ok(data, width, tol).map_err(|e| {
                Error::Validation(format!("agent {}: {name} {e}", spec.agent_id))
            })?;
        }
        let mut params = Self {
            spec,
            mu,
            lambda0,
            lambda,
            delta,
        };
        if tol > SIMPLEX_TOL {
            params.renormalize();
        }
        Ok(params)
    }

    fn renormalize(&mut self) {
        let (q, m) = (self.spec.num_nodes, self.spec.num_actions);
        renormalize_rows(&mut self.mu, q);
        renormalize_rows(&mut self.lambda0, m);
        renormalize_rows(&mut self.lambda, m);
        renormalize_rows(&mut self.delta, q);
    }

    /// Every row uniform.
    pub fn uniform(spec: AgentSpec) -> Result<Self> {
        spec.validate()?;
        let (q, o, m) = (spec.num_nodes, spec.num_observations, spec.num_actions);
        Ok(Self {
            spec,
            mu: vec![1.0 / q as f64; q],
            lambda0: vec![1.0 / m as f64; q * m],
            lambda: vec![1.0 / m as f64; q * o * m],
            delta: vec![1.0 / q as f64; q * o * q],
        })
    }

    /// Draw every row independently from the flat Dirichlet over its simplex.
    ///
    /// Rows are filled in the order `mu`, `lambda0` (by node), `lambda` (by node,
    /// then observation), `delta` (by node, then observation); each row consumes
    /// one uniform per entry through [`dirichlet_flat`].
    pub fn init_dirichlet<R: Rng + ?Sized>(spec: AgentSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::uniform(spec)?;
        let (q, m) = (spec.num_nodes, spec.num_actions);
        for row in p.mu.chunks_mut(q) {
            dirichlet_flat(rng, row);
        }
        for row in p.lambda0.chunks_mut(m) {
            dirichlet_flat(rng, row);
        }
        for row in p.lambda.chunks_mut(m) {
            dirichlet_flat(rng, row);
        }
        for row in p.delta.chunks_mut(q) {
            dirichlet_flat(rng, row);
        }
        Ok(p)
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn num_nodes(&self) -> usize {
        self.spec.num_nodes
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_actions
    }

    pub fn num_observations(&self) -> usize {
        self.spec.num_observations
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn lambda0_row(&self, q: usize) -> &[f64] {
        let m = self.spec.num_actions;
        &self.lambda0[q * m..(q + 1) * m]
    }

    pub fn lambda_row(&self, q: usize, o: usize) -> &[f64] {
        let m = self.spec.num_actions;
        let start = (q * self.spec.num_observations + o) * m;
        &self.lambda[start..start + m]
    }

    pub fn delta_row(&self, q: usize, o: usize) -> &[f64] {
        let n = self.spec.num_nodes;
        let start = (q * self.spec.num_observations + o) * n;
        &self.delta[start..start + n]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        let (q, m) = (self.spec.num_nodes, self.spec.num_actions);
        [(&self.mu, q), (&self.lambda0, m), (&self.lambda, m), (&self.delta, q)]
            .iter()
            .flat_map(|(d, w)| d.chunks(*w).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.mu
            .iter()
            .chain(&self.lambda0)
            .chain(&self.lambda)
            .chain(&self.delta)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn check_obs(&self, o: usize) -> Result<()> {
        if o >= self.spec.num_observations {
            return Err(Error::Domain(format!(
                "observation {o} out of range for agent {} (|O| = {})",
                self.spec.agent_id, self.spec.num_observations
            )));
        }
        Ok(())
    }

    fn check_action(&self, m: usize) -> Result<()> {
        if m >= self.spec.num_actions {
            return Err(Error::Domain(format!(
                "action {m} out of range for agent {} (|M| = {})",
                self.spec.agent_id, self.spec.num_actions
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FscRuntimeState {
    pub current_node: usize,
    pub steps_taken: usize,
}

/// One controller decision. See the module docs for the sampling order.
///
/// Returns the action, the advanced runtime state, and the probability of the
/// sampled action under the output law that produced it.
pub fn fsc_step<R: Rng + ?Sized>(
    params: &FscParams,
    state: FscRuntimeState,
    obs: Option<usize>,
    rng: &mut R,
) -> Result<(usize, FscRuntimeState, f64)> {
    fsc_step_masked(params, state, obs, None, rng)
}

/// Like [`fsc_step`], restricted to the actions flagged in `initiable`.
///
/// The output row is renormalized over the allowed actions and the returned
/// probability is taken under that renormalized law.
pub fn fsc_step_masked<R: Rng + ?Sized>(
    params: &FscParams,
    state: FscRuntimeState,
    obs: Option<usize>,
    initiable: Option<&[bool]>,
    rng: &mut R,
) -> Result<(usize, FscRuntimeState, f64)> {
    if let Some(mask) = initiable {
        if mask.len() != params.num_actions() {
            return Err(Error::Contract(format!(
                "initiation mask has {} entries for {} actions",
                mask.len(),
                params.num_actions()
            )));
        }
    }
    let (node, row) = if state.steps_taken == 0 {
        let q = sample_weighted(rng, params.mu())
            .ok_or_else(|| Error::Contract("initial node law has no mass".into()))?;
        (q, params.lambda0_row(q))
    } else {
        let o = obs.ok_or_else(|| {
            Error::Domain("an observation is required after the first decision".into())
        })?;
        params.check_obs(o)?;
        let q = sample_weighted(rng, params.delta_row(state.current_node, o))
            .ok_or_else(|| Error::Contract("node transition row has no mass".into()))?;
        (q, params.lambda_row(q, o))
    };
    let weights: Vec<f64> = match initiable {
        Some(mask) => row
            .iter()
            .zip(mask)
            .map(|(&p, &ok)| if ok { p } else { 0.0 })
            .collect(),
        None => row.to_vec(),
    };
    let total: f64 = weights.iter().sum();
    let action = sample_weighted(rng, &weights)
        .ok_or_else(|| Error::Contract("no initiable action has positive probability".into()))?;
    let next = FscRuntimeState {
        current_node: node,
        steps_taken: state.steps_taken + 1,
    };
    Ok((action, next, weights[action] / total))
}

/// Scaled forward messages for one agent's action/observation sequence.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub num_nodes: usize,
    /// Filtered node posteriors `p(q_i | m_0..m_i, o_1..o_i)`, row-major by decision.
    pub alpha: Vec<f64>,
    /// `ln p(m_i | m_0..m_{i-1}, o_1..o_i)` for each decision.
    pub log_norm: Vec<f64>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.log_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_norm.is_empty()
    }

    pub fn alpha(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.num_nodes..(i + 1) * self.num_nodes]
    }

    /// Cumulative sums of the log normalizers: `ln p(m_0..m_t | o_1..o_t)`.
    pub fn log_prefix(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.log_norm
            .iter()
            .map(|&c| {
                acc += c;
                acc
            })
            .collect()
    }
}

fn check_sequence(params: &FscParams, actions: &[usize], observations: &[usize]) -> Result<()> {
    if actions.is_empty() {
        return Err(Error::Domain("empty action sequence".into()));
    }
    if observations.len() + 1 != actions.len() {
        return Err(Error::Domain(format!(
            "{} actions need {} observations, got {}",
            actions.len(),
            actions.len() - 1,
            observations.len()
        )));
    }
    for &m in actions {
        params.check_action(m)?;
    }
    for &o in observations {
        params.check_obs(o)?;
    }
    Ok(())
}

/// Forward recursion with per-step normalization.
///
/// `observations[i - 1]` is the observation received before action `actions[i]`.
pub fn forward(params: &FscParams, actions: &[usize], observations: &[usize]) -> Result<ForwardPass> {
    check_sequence(params, actions, observations)?;
    let nq = params.num_nodes();
    let n = actions.len();
    let mut alpha = vec![0.0; n * nq];
    let mut log_norm = vec![f64::NEG_INFINITY; n];

    let first = &mut alpha[..nq];
    for (q, a) in first.iter_mut().enumerate() {
        *a = params.mu[q] * params.lambda0_row(q)[actions[0]];
    }
    let mut c: f64 = first.iter().sum();
    if !(c > 0.0) {
        return Ok(ForwardPass {
            num_nodes: nq,
            alpha,
            log_norm,
        });
    }
    first.iter_mut().for_each(|a| *a /= c);
    log_norm[0] = c.ln();

    let mut pred = vec![0.0; nq];
    for i in 1..n {
        let o = observations[i - 1];
        let m = actions[i];
        pred.iter_mut().for_each(|p| *p = 0.0);
        let (done, rest) = alpha.split_at_mut(i * nq);
        let prev = &done[(i - 1) * nq..];
        for (q, &a) in prev.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (p, &d) in pred.iter_mut().zip(params.delta_row(q, o)) {
                *p += a * d;
            }
        }
        let cur = &mut rest[..nq];
        c = 0.0;
        for (q2, x) in cur.iter_mut().enumerate() {
            *x = pred[q2] * params.lambda_row(q2, o)[m];
            c += *x;
        }
        if !(c > 0.0) {
            break;
        }
        cur.iter_mut().for_each(|x| *x /= c);
        log_norm[i] = c.ln();
    }
    Ok(ForwardPass {
        num_nodes: nq,
        alpha,
        log_norm,
    })
}

/// `ln p(m_0..m_t | o_1..o_t)` for `t = 0..T`.
pub fn log_prefix_likelihoods(
    params: &FscParams,
    actions: &[usize],
    observations: &[usize],
) -> Result<Vec<f64>> {
    Ok(forward(params, actions, observations)?.log_prefix())
}

/// Prefix likelihoods `p(m_0..m_t | o_1..o_t, params)` for `t = 0..T`.
pub fn sequence_likelihood(
    params: &FscParams,
    actions: &[usize],
    observations: &[usize],
) -> Result<Vec<f64>> {
    Ok(log_prefix_likelihoods(params, actions, observations)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Controllers for a team, one per agent, looked up by agent id.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFsc {
    agents: Vec<FscParams>,
}

impl JointFsc {
    pub fn new(agents: Vec<FscParams>) -> Result<Self> {
        for (i, a) in agents.iter().enumerate() {
            if agents[..i].iter().any(|b| b.spec.agent_id == a.spec.agent_id) {
                return Err(Error::Validation(format!(
                    "duplicate controller for agent {}",
                    a.spec.agent_id
                )));
            }
        }
        Ok(Self { agents })
    }

    /// Independent flat-Dirichlet draws for every agent, in the given order.
    pub fn init_dirichlet<R: Rng + ?Sized>(specs: &[AgentSpec], rng: &mut R) -> Result<Self> {
        let agents = specs
            .iter()
            .map(|s| FscParams::init_dirichlet(*s, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(agents)
    }

    pub fn agents(&self) -> &[FscParams] {
        &self.agents
    }

    pub(crate) fn agents_mut(&mut self) -> &mut [FscParams] {
        &mut self.agents
    }

    pub fn get(&self, agent_id: usize) -> Option<&FscParams> {
        self.agents.iter().find(|a| a.spec.agent_id == agent_id)
    }

    pub fn specs(&self) -> Vec<AgentSpec> {
        self.agents.iter().map(|a| a.spec).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyRecord {
    spec: AgentSpec,
    mu: Vec<f64>,
    lambda0: Vec<Vec<f64>>,
    lambda: Vec<Vec<Vec<f64>>>,
    delta: Vec<Vec<Vec<f64>>>,
}

impl PolicyRecord {
    fn from_params(p: &FscParams) -> Self {
        let s = p.spec;
        let (nq, no) = (s.num_nodes, s.num_observations);
        Self {
            spec: s,
            mu: p.mu.clone(),
            lambda0: (0..nq).map(|q| p.lambda0_row(q).to_vec()).collect(),
            lambda: (0..nq)
                .map(|q| (0..no).map(|o| p.lambda_row(q, o).to_vec()).collect())
                .collect(),
            delta: (0..nq)
                .map(|q| (0..no).map(|o| p.delta_row(q, o).to_vec()).collect())
                .collect(),
        }
    }

    fn into_params(self) -> Result<FscParams> {
        let s = self.spec;
        let agent = s.agent_id;
        let shape_err = |what: &str| {
            Error::Validation(format!("policy for agent {agent}: {what} has the wrong shape"))
        };
        if self.lambda0.len() != s.num_nodes || self.lambda0.iter().any(|r| r.len() != s.num_actions) {
            return Err(shape_err("lambda0"));
        }
        let cube_ok = |c: &Vec<Vec<Vec<f64>>>, width: usize| {
            c.len() == s.num_nodes
                && c.iter()
                    .all(|p| p.len() == s.num_observations && p.iter().all(|r| r.len() == width))
        };
        if !cube_ok(&self.lambda, s.num_actions) {
            return Err(shape_err("lambda"));
        }
        if !cube_ok(&self.delta, s.num_nodes) {
            return Err(shape_err("delta"));
        }
        FscParams::from_parts_with_tol(
            s,
            self.mu,
            self.lambda0.into_iter().flatten().collect(),
            self.lambda.into_iter().flatten().flatten().collect(),
            self.delta.into_iter().flatten().flatten().collect(),
            FILE_SIMPLEX_TOL,
        )
    }
}

/// Write the policy file: a JSON array with one object per agent.
pub fn write_policy<W: Write>(policy: &JointFsc, mut out: W) -> Result<()> {
    out.write_all(b"[\n")?;
    for (i, p) in policy.agents.iter().enumerate() {
        if i > 0 {
            out.write_all(b",\n")?;
        }
        serde_json::to_writer(&mut out, &PolicyRecord::from_params(p))?;
    }
    out.write_all(b"\n]\n")?;
    Ok(())
}

/// Read a policy file; rows off the simplex by more than [`FILE_SIMPLEX_TOL`] are rejected.
pub fn read_policy<R: Read>(input: R) -> Result<JointFsc> {
    let records: Vec<PolicyRecord> = serde_json::from_reader(input)?;
    let agents = records
        .into_iter()
        .map(PolicyRecord::into_params)
        .collect::<Result<Vec<_>>>()?;
    JointFsc::new(agents)
}
