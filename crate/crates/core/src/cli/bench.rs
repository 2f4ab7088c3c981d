use std::io::Write;

use serde::Serialize;

use crate::behavior::{generate_dataset, generate_with_tag, BehaviorConfig};
use crate::dataset::{empirical_value, split_dataset, Episode, LearnConfig, LoggedBehavior};
use crate::error::{Error, Result};
use crate::isem::{isem_train, thread_init, IsemConfig};
use crate::poem::{csv_err, poem_train, PoemConfig};
use crate::rng::{stream, tag};
use crate::sim::scenario::ScenarioConfig;
use crate::stats::{mean, sample_variance};

/// One matched comparison of single-run PoEM against iSEM.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialConfig {
    pub scenario: ScenarioConfig,
    pub rho: f64,
    pub episodes: usize,
    pub test_episodes: usize,
    pub eval_fraction: f64,
    pub num_nodes: usize,
    pub threads: usize,
    pub max_outer: usize,
    pub epsilon: f64,
    pub learn: LearnConfig,
    pub poem: PoemConfig,
}

impl TrialConfig {
    /// The reduced three-site, two-agent setting.
    pub fn mini() -> Self {
        Self {
            scenario: ScenarioConfig::mini(),
            rho: 0.75,
            episodes: 200,
            test_episodes: 20_000,
            eval_fraction: 0.2,
            num_nodes: 3,
            threads: 8,
            max_outer: 20,
            epsilon: 0.1,
            learn: LearnConfig::default(),
            poem: PoemConfig::default(),
        }
    }

    /// The six-site, four-agent setting.
    pub fn full() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            rho: 0.85,
            episodes: 100,
            ..Self::mini()
        }
    }

    pub fn isem_config(&self, seed: u64) -> IsemConfig {
        IsemConfig {
            threads: self.threads,
            max_outer: self.max_outer,
            epsilon: self.epsilon,
            relative_epsilon: false,
            num_nodes: self.num_nodes,
            master_seed: seed,
            poem: self.poem,
            learn: self.learn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub poem_value: f64,
    pub isem_value: f64,
    /// Value of the behavior policy on the same test set.
    pub behavior_value: f64,
}

/// Training data, its split, and a held-out test set for one seed.
pub struct TrialData {
    pub train: Vec<Episode>,
    pub eval: Vec<Episode>,
    pub test: Vec<Episode>,
}

pub fn trial_data(cfg: &TrialConfig, seed: u64) -> Result<TrialData> {
    let behavior = BehaviorConfig {
        rho: cfg.rho,
        episodes: cfg.episodes,
        master_seed: seed,
        scenario: cfg.scenario.clone(),
    };
    let data = generate_dataset(&behavior)?;
    let (train, eval) = split_dataset(&data, cfg.eval_fraction, &mut stream(seed, &[tag::SPLIT]))?;
    let test = generate_with_tag(
        &BehaviorConfig {
            episodes: cfg.test_episodes,
            ..behavior
        },
        tag::TEST,
    )?;
    Ok(TrialData { train, eval, test })
}

/// Train both algorithms on the same data and score them on the test set.
///
/// PoEM starts from the same initialization as thread 0 of the first iSEM
/// iteration, so with one thread the two coincide.
pub fn run_trial(cfg: &TrialConfig, seed: u64) -> Result<TrialResult> {
    let d = trial_data(cfg, seed)?;
    let specs = cfg.scenario.agent_specs(cfg.num_nodes);
    let init = thread_init(&specs, cfg.num_nodes, seed, 0, 1)?;
    let (poem_theta, _) = poem_train(&init, &d.train, &cfg.learn, &cfg.poem)?;
    let (isem_theta, _) = isem_train(&specs, &d.train, &d.eval, &cfg.isem_config(seed))?;
    Ok(TrialResult {
        seed,
        poem_value: empirical_value(&d.test, &poem_theta, &cfg.learn)?,
        isem_value: empirical_value(&d.test, &isem_theta, &cfg.learn)?,
        behavior_value: empirical_value(&d.test, &LoggedBehavior, &cfg.learn)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVar {
    K,
    M,
    Q,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::K => "k",
            SweepVar::M => "m",
            SweepVar::Q => "q",
        }
    }

    pub fn preset(self) -> &'static [usize] {
        match self {
            SweepVar::K => &[50, 100, 200, 500],
            SweepVar::M => &[1, 2, 4, 8],
            SweepVar::Q => &[1, 3, 10],
        }
    }

    pub fn apply(self, base: &TrialConfig, value: usize) -> TrialConfig {
        let mut c = base.clone();
        match self {
            SweepVar::K => c.episodes = value,
            SweepVar::M => c.threads = value,
            SweepVar::Q => c.num_nodes = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_value: usize,
    pub trial: TrialResult,
}

/// Run every (value, seed) pair in order.
pub fn run_sweep(base: &TrialConfig, var: SweepVar, values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &v in values {
        let cfg = var.apply(base, v);
        for &seed in seeds {
            rows.push(SweepRow {
                sweep_value: v,
                trial: run_trial(&cfg, seed)?,
            });
        }
    }
    Ok(rows)
}

/// Per-seed rows followed by one aggregate row per (algorithm, value); the
/// per-seed rows have an empty stddev and a seed count of 1.
pub fn write_sweep_csv<W: Write>(var: SweepVar, rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algo", "sweep_var", "sweep_value", "seed", "value_mean", "value_stddev", "seed_count"])
        .map_err(csv_err)?;
    let algos: [(&str, fn(&TrialResult) -> f64); 3] = [
        ("poem", |t| t.poem_value),
        ("isem", |t| t.isem_value),
        ("behavior", |t| t.behavior_value),
    ];
    for r in rows {
        for (name, get) in algos {
            w.write_record([
                name.to_string(),
                var.name().to_string(),
                r.sweep_value.to_string(),
                r.trial.seed.to_string(),
                get(&r.trial).to_string(),
                String::new(),
                "1".to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let mut values: Vec<usize> = rows.iter().map(|r| r.sweep_value).collect();
    values.dedup();
    for v in values {
        for (name, get) in algos {
            let xs: Vec<f64> = rows.iter().filter(|r| r.sweep_value == v).map(|r| get(&r.trial)).collect();
            let sd = if xs.len() > 1 { sample_variance(&xs).sqrt() } else { 0.0 };
            w.write_record([
                name.to_string(),
                var.name().to_string(),
                v.to_string(),
                "all".to_string(),
                mean(&xs).to_string(),
                sd.to_string(),
                xs.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(Error::Io)
}
