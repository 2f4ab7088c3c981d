//! Random-restart wrapper around [`poem_train`].
//!
//! Each outer iteration trains every non-retained thread from a fresh
//! flat-Dirichlet initialization, scores all threads on held-out data, updates
//! the best-ever controller and keeps the threads whose score is within
//! `epsilon` of it. The loop stops when every thread is retained or after
//! `max_outer` iterations.
//!
//! Thread `i` at outer iteration `t` (1-based) draws its initialization from the
//! stream keyed `(master_seed, THREAD, i, t)`, so the result does not depend on
//! how threads are scheduled.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{empirical_value, Episode, LearnConfig};
use crate::error::{Error, Result};
use crate::fsc::{AgentSpec, JointFsc};
use crate::poem::{csv_err, poem_train, PoemConfig, TrainStats};
use crate::rng::{derive_seed, stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsemConfig {
    pub threads: usize,
    pub max_outer: usize,
    pub epsilon: f64,
    /// Compare `epsilon` against `(best - v) / |best|` instead of `best - v`.
    pub relative_epsilon: bool,
    pub num_nodes: usize,
    pub master_seed: u64,
    pub poem: PoemConfig,
    pub learn: LearnConfig,
}

impl Default for IsemConfig {
    fn default() -> Self {
        Self {
            threads: 8,
            max_outer: 20,
            epsilon: 0.1,
            relative_epsilon: false,
            num_nodes: 3,
            master_seed: 0,
            poem: PoemConfig::default(),
            learn: LearnConfig::default(),
        }
    }
}

impl IsemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 || self.max_outer == 0 {
            return Err(Error::Domain("threads and max_outer must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Domain(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.num_nodes == 0 {
            return Err(Error::InvalidSpec("num_nodes must be >= 1".into()));
        }
        self.learn.validate()
    }

    fn gap(&self, best: f64, v: f64) -> f64 {
        if self.relative_epsilon {
            (best - v) / best.abs()
        } else {
            best - v
        }
    }
}

/// Seed of the stream that initializes `thread` at outer iteration `iteration`.
pub fn thread_seed(master_seed: u64, thread: usize, iteration: usize) -> u64 {
    derive_seed(master_seed, &[tag::THREAD, thread as u64, iteration as u64])
}

/// The initialization thread `thread` uses at outer iteration `iteration` (1-based).
pub fn thread_init(specs: &[AgentSpec], num_nodes: usize, master_seed: u64, thread: usize, iteration: usize) -> Result<JointFsc> {
    let specs: Vec<AgentSpec> = specs.iter().map(|s| s.with_nodes(num_nodes)).collect();
    let mut rng = stream(master_seed, &[tag::THREAD, thread as u64, iteration as u64]);
    JointFsc::init_dirichlet(&specs, &mut rng)
}

#[derive(Clone, Debug)]
pub struct ThreadResult {
    pub theta: JointFsc,
    pub eval_value: f64,
    pub stats: TrainStats,
    /// Outer iteration that produced this result.
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsemRecord {
    pub iteration: usize,
    pub thread: usize,
    pub eval_value: f64,
    pub retained: bool,
    pub best_value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct IsemState {
    /// Threads kept at the end of the last iteration.
    pub retained: Vec<usize>,
    /// Threads that would be resampled next.
    pub resample: Vec<usize>,
    pub threads: Vec<Option<ThreadResult>>,
    pub best_value: f64,
    pub best_thread: usize,
    pub best_iteration: usize,
    /// Best-ever evaluation value after each outer iteration.
    pub best_trace: Vec<f64>,
    pub records: Vec<IsemRecord>,
    pub iterations_run: usize,
}

impl IsemState {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "thread", "eval_value", "retained", "best_value"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.thread.to_string(),
                r.eval_value.to_string(),
                u8::from(r.retained).to_string(),
                r.best_value.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_thread(
    specs: &[AgentSpec],
    train: &[Episode],
    eval: &[Episode],
    cfg: &IsemConfig,
    thread: usize,
    iteration: usize,
) -> Result<ThreadResult> {
    let init = thread_init(specs, cfg.num_nodes, cfg.master_seed, thread, iteration)?;
    let (theta, stats) = poem_train(&init, train, &cfg.learn, &cfg.poem)?;
    let eval_value = empirical_value(eval, &theta, &cfg.learn)?;
    Ok(ThreadResult {
        theta,
        eval_value,
        stats,
        iteration,
    })
}

/// Train with restarts; returns the best-ever controller and the run history.
pub fn isem_train(
    specs: &[AgentSpec],
    train: &[Episode],
    eval: &[Episode],
    cfg: &IsemConfig,
) -> Result<(JointFsc, IsemState)> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InsufficientData("training and evaluation sets must be nonempty".into()));
    }
    let m = cfg.threads;
    let mut state = IsemState {
        threads: vec![None; m],
        best_value: f64::NEG_INFINITY,
        ..IsemState::default()
    };
    let mut best: Option<JointFsc> = None;
    let mut retained = vec![false; m];

    loop {
        let resample: Vec<usize> = (0..m).filter(|&i| !retained[i]).collect();
        if resample.is_empty() || state.iterations_run >= cfg.max_outer {
            state.resample = resample;
            break;
        }
        state.iterations_run += 1;
        let it = state.iterations_run;
        let results: Vec<Result<ThreadResult>> = resample
            .par_iter()
            .map(|&i| run_thread(specs, train, eval, cfg, i, it))
            .collect();
        for (&i, r) in resample.iter().zip(results) {
            match r {
                Ok(tr) => state.threads[i] = Some(tr),
                Err(e) => {
                    return Err(Error::ThreadFailed {
                        thread: i,
                        seed: thread_seed(cfg.master_seed, i, it),
                        source: Box::new(e),
                    })
                }
            }
        }

        let mut arg = 0;
        let mut top = f64::NEG_INFINITY;
        for (i, t) in state.threads.iter().enumerate() {
            let v = t.as_ref().map_or(f64::NEG_INFINITY, |t| t.eval_value);
            if i == 0 || v > top {
                arg = i;
                top = v;
            }
        }
        if best.is_none() || top > state.best_value {
            let t = state.threads[arg].as_ref().expect("every thread has run once");
            best = Some(t.theta.clone());
            state.best_value = top;
            state.best_thread = arg;
            state.best_iteration = it;
        }
        state.best_trace.push(state.best_value);

        for (i, t) in state.threads.iter().enumerate() {
            let v = t.as_ref().map_or(f64::NEG_INFINITY, |t| t.eval_value);
            retained[i] = cfg.gap(state.best_value, v) < cfg.epsilon;
            state.records.push(IsemRecord {
                iteration: it,
                thread: i,
                eval_value: v,
                retained: retained[i],
                best_value: state.best_value,
            });
        }
        state.retained = (0..m).filter(|&i| retained[i]).collect();
    }
    Ok((best.expect("at least one outer iteration runs"), state))
}
