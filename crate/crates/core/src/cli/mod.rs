//! The `isem` command-line front end.
//!
//! Every artifact-producing command writes into an `--out` directory together
//! with a `manifest.json` recording the arguments, the resolved configuration
//! and the digests of inputs and outputs, so `isem replay` can reproduce it.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or validation error,
//! 4 numeric failure.

pub mod bench;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::behavior::{generate_with_tag, BehaviorConfig};
use crate::dataset::{
    empirical_value, mean_discounted_return, read_episodes, split_dataset, write_episodes, Discounting, Episode,
    LearnConfig, LoggedBehavior, RMinPolicy,
};
use crate::error::{Error, Result};
use crate::fsc::{read_policy, write_policy, JointFsc};
use crate::isem::{isem_train, thread_init, IsemConfig};
use crate::poem::{poem_train, PoemConfig};
use crate::rng::{stream, tag};
use crate::sim::runner::rollout_evaluate;
use crate::sim::scenario::ScenarioConfig;
use bench::{run_sweep, write_sweep_csv, SweepVar, TrialConfig};
use manifest::{file_digest, redirect_out, RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Default thread count for `train --algo isem`.
pub const THREADS_ENV: &str = "ISEM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "isem", version, about = "Learn macro-action controllers for search and rescue from batch data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate episodes under the expert/random mixture behavior policy.
    GenData(GenDataArgs),
    /// Learn a controller with PoEM or iSEM.
    Train(TrainArgs),
    /// Importance-weighted value of a controller on a dataset.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo returns of a controller in the simulator.
    Rollout(RolloutArgs),
    /// Compare PoEM and iSEM over a parameter sweep.
    Bench(BenchArgs),
    /// Re-run a recorded command into a new directory and check its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
struct ScenarioArgs {
    /// Scenario file (TOML); defaults to the six-site layout.
    #[arg(long, conflicts_with = "mini")]
    scenario: Option<PathBuf>,
    /// Use the reduced three-site scenario.
    #[arg(long)]
    mini: bool,
}

impl ScenarioArgs {
    fn load(&self, inputs: &mut Inputs) -> Result<ScenarioConfig> {
        match &self.scenario {
            Some(p) => {
                inputs.add(p)?;
                ScenarioConfig::from_toml(&fs::read_to_string(p)?)
            }
            None if self.mini => Ok(ScenarioConfig::mini()),
            None => Ok(ScenarioConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DiscountArg {
    /// gamma to the primitive step of the reward
    Step,
    /// gamma to the number of decision epochs before the reward
    Epoch,
}

#[derive(Debug, Args, Serialize)]
struct LearnArgs {
    #[arg(long, default_value_t = 0.999)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = DiscountArg::Step)]
    discounting: DiscountArg,
}

impl LearnArgs {
    fn config(&self, r_min: Option<f64>) -> Result<LearnConfig> {
        let cfg = LearnConfig {
            gamma: self.gamma,
            r_min: r_min.map_or(RMinPolicy::FromData, RMinPolicy::Explicit),
            discounting: match self.discounting {
                DiscountArg::Step => Discounting::PrimitiveStep,
                DiscountArg::Epoch => Discounting::DecisionEpoch,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Percentage of expert decisions, in [0, 100).
    #[arg(long, default_value_t = 85.0)]
    rho: f64,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw from the held-out test streams instead of the training ones.
    #[arg(long)]
    test_stream: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Algo {
    Poem,
    Isem,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    /// Training episodes.
    #[arg(long)]
    train: PathBuf,
    /// Evaluation episodes; without it a share of the training file is held out.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Controller nodes per agent.
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    /// Restart threads (defaults to $ISEM_THREADS, else 8).
    #[arg(long, env = THREADS_ENV, default_value_t = 8)]
    threads: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Read epsilon as a fraction of the best value.
    #[arg(long)]
    relative_epsilon: bool,
    #[arg(long, default_value_t = 20)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_inner: usize,
    /// Fixed reward shift; by default the smallest reward in the training data.
    #[arg(long, allow_negative_numbers = true)]
    r_min: Option<f64>,
    #[command(flatten)]
    learn: LearnArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[group(id = "target", required = true, multiple = false, args = ["policy", "behavior"])]
struct EvaluateArgs {
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Evaluate the policy that generated the data.
    #[arg(long)]
    behavior: bool,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    learn: LearnArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    policy: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0.999)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SweepArg {
    K,
    M,
    Q,
}

impl From<SweepArg> for SweepVar {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::K => SweepVar::K,
            SweepArg::M => SweepVar::M,
            SweepArg::Q => SweepVar::Q,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_enum)]
    sweep: SweepArg,
    /// Three sites, three victims, two agents.
    #[arg(long)]
    mini: bool,
    /// Seeds 0..N.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Override the preset sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long)]
    test_episodes: Option<usize>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Input files read by a command, with their digests.
#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn add(&mut self, path: &Path) -> Result<()> {
        self.0.insert(path.to_string_lossy().into_owned(), file_digest(path)?);
        Ok(())
    }
}

/// Files written by a command, in write order.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.files.insert(name.to_string(), file_digest(&path)?);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    fn finish<C: Serialize>(
        self,
        command: &str,
        argv: &[String],
        config: &C,
        master_seed: Option<u64>,
        inputs: Inputs,
        started: Instant,
    ) -> Result<()> {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            master_seed,
            inputs: inputs.0,
            outputs: self.files,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        }
        .write(&self.dir)
    }
}

fn load_episodes(path: &Path, inputs: &mut Inputs) -> Result<Vec<Episode>> {
    inputs.add(path)?;
    read_episodes(BufReader::new(File::open(path)?))
}

fn load_policy(path: &Path, inputs: &mut Inputs) -> Result<JointFsc> {
    inputs.add(path)?;
    read_policy(BufReader::new(File::open(path)?))
}

fn check_digest(episodes: &[Episode], scenario: &ScenarioConfig, what: &str) -> Result<()> {
    let digest = scenario.digest();
    match episodes.iter().find(|e| e.scenario_digest != digest) {
        Some(e) => Err(Error::Mismatch(format!(
            "{what} episode {} was generated under a different scenario (check --mini / --scenario)",
            e.episode_id
        ))),
        None => Ok(()),
    }
}

/// Map an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        match e {
            Error::Domain(_) | Error::InvalidSpec(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

/// Parse `argv` (program name first) and run the command; returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let rest = argv.get(1..).unwrap_or_default();
    match dispatch(cli.command, rest) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Evaluate(a) => evaluate(&a, argv),
        Command::Rollout(a) => rollout(&a, argv),
        Command::Bench(a) => bench_cmd(&a, argv),
        Command::Replay(a) => replay(&a),
    }
}

fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut inputs = Inputs::default();
    if !(0.0..100.0).contains(&a.rho) {
        return Err(Error::Domain(format!("--rho is a percentage in [0, 100), got {}", a.rho)));
    }
    let cfg = BehaviorConfig {
        rho: a.rho / 100.0,
        episodes: a.episodes,
        master_seed: a.seed,
        scenario: a.scenario.load(&mut inputs)?,
    };
    let stream_tag = if a.test_stream { tag::TEST } else { tag::EPISODE };
    let episodes = generate_with_tag(&cfg, stream_tag)?;
    let mut out = Outputs::new(&a.out)?;
    out.write("episodes.jsonl", |w| write_episodes(&episodes, w))?;
    out.write("scenario.toml", |w| Ok(w.write_all(cfg.scenario.to_toml().as_bytes())?))?;
    let mean_return = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(Episode::total_reward).sum::<f64>() / episodes.len() as f64
    };
    println!("wrote {} episodes, mean undiscounted return {mean_return:.4}", episodes.len());
    out.finish("gen-data", argv, &(a, &cfg), Some(a.seed), inputs, started)
}

#[derive(Serialize)]
struct TrainSummary {
    algo: Algo,
    train_episodes: usize,
    eval_episodes: usize,
    eval_value: f64,
    r_min_used: f64,
    inner_iterations: usize,
    outer_iterations: usize,
    converged: bool,
}

fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut inputs = Inputs::default();
    let scenario = a.scenario.load(&mut inputs)?;
    let learn = a.learn.config(a.r_min)?;
    let data = load_episodes(&a.train, &mut inputs)?;
    check_digest(&data, &scenario, "training")?;
    let (train, eval) = match &a.eval {
        Some(p) => {
            let eval = load_episodes(p, &mut inputs)?;
            check_digest(&eval, &scenario, "evaluation")?;
            (data, eval)
        }
        None => split_dataset(&data, a.eval_fraction, &mut stream(a.seed, &[tag::SPLIT]))?,
    };
    let poem = PoemConfig {
        tol: a.tol,
        max_inner: a.max_inner,
    };
    let isem = IsemConfig {
        threads: a.threads,
        max_outer: a.max_outer,
        epsilon: a.epsilon,
        relative_epsilon: a.relative_epsilon,
        num_nodes: a.nodes,
        master_seed: a.seed,
        poem,
        learn,
    };
    isem.validate()?;
    let specs = scenario.agent_specs(a.nodes);
    let mut out = Outputs::new(&a.out)?;
    let summary = match a.algo {
        Algo::Poem => {
            let init = thread_init(&specs, a.nodes, a.seed, 0, 1)?;
            let (theta, stats) = poem_train(&init, &train, &learn, &poem)?;
            out.write("policy.json", |w| write_policy(&theta, w))?;
            out.write("stats.csv", |w| stats.write_csv(w))?;
            TrainSummary {
                algo: a.algo,
                train_episodes: train.len(),
                eval_episodes: eval.len(),
                eval_value: empirical_value(&eval, &theta, &learn)?,
                r_min_used: stats.r_min_used,
                inner_iterations: stats.iterations_run,
                outer_iterations: 1,
                converged: stats.converged,
            }
        }
        Algo::Isem => {
            let (theta, state) = isem_train(&specs, &train, &eval, &isem)?;
            out.write("policy.json", |w| write_policy(&theta, w))?;
            out.write("stats.csv", |w| state.write_csv(w))?;
            let best = state.threads[state.best_thread].as_ref();
            TrainSummary {
                algo: a.algo,
                train_episodes: train.len(),
                eval_episodes: eval.len(),
                eval_value: state.best_value,
                r_min_used: learn.resolve_r_min(&train),
                inner_iterations: best.map_or(0, |t| t.stats.iterations_run),
                outer_iterations: state.iterations_run,
                converged: state.resample.is_empty(),
            }
        }
    };
    out.write_json("summary.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    // pin a thread count taken from the environment so replays do not depend on it
    let mut recorded = argv.to_vec();
    if !argv.iter().any(|x| x == "--threads" || x.starts_with("--threads=")) {
        recorded.extend(["--threads".to_string(), a.threads.to_string()]);
    }
    out.finish("train", &recorded, &(a, &isem), Some(a.seed), inputs, started)
}

#[derive(Serialize)]
struct EvaluateSummary {
    episodes: usize,
    value: f64,
    mean_discounted_return: f64,
}

fn evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut inputs = Inputs::default();
    let learn = a.learn.config(None)?;
    let data = load_episodes(&a.data, &mut inputs)?;
    let value = match &a.policy {
        Some(p) => empirical_value(&data, &load_policy(p, &mut inputs)?, &learn)?,
        None => empirical_value(&data, &LoggedBehavior, &learn)?,
    };
    let summary = EvaluateSummary {
        episodes: data.len(),
        value,
        mean_discounted_return: mean_discounted_return(&data, &learn)?,
    };
    println!("{}", serde_json::to_string(&summary)?);
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir)?;
        out.write_json("value.json", &summary)?;
        out.finish("evaluate", argv, &(a, &learn), None, inputs, started)?;
    }
    Ok(())
}

fn rollout(a: &RolloutArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut inputs = Inputs::default();
    let scenario = a.scenario.load(&mut inputs)?;
    let theta = load_policy(&a.policy, &mut inputs)?;
    if !(0.0..=1.0).contains(&a.gamma) {
        return Err(Error::Domain(format!("gamma {} outside [0, 1]", a.gamma)));
    }
    let summary = rollout_evaluate(&theta, &scenario, a.episodes, a.gamma, a.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": a.episodes,
            "mean_discounted": summary.mean_discounted,
            "mean_undiscounted": summary.mean_undiscounted,
        })
    );
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir)?;
        out.write_json("rollout.json", &summary)?;
        out.finish("rollout", argv, &(a, &scenario), Some(a.seed), inputs, started)?;
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let var = SweepVar::from(a.sweep);
    let mut base = if a.mini { TrialConfig::mini() } else { TrialConfig::full() };
    if let Some(n) = a.test_episodes {
        base.test_episodes = n;
    }
    if let Some(n) = a.max_outer {
        base.max_outer = n;
    }
    let values = a.values.clone().unwrap_or_else(|| var.preset().to_vec());
    if values.is_empty() || a.seeds == 0 {
        return Err(Error::Domain("bench needs at least one value and one seed".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let rows = run_sweep(&base, var, &values, &seeds)?;
    let mut out = Outputs::new(&a.out)?;
    out.write("bench.csv", |w| write_sweep_csv(var, &rows, w))?;
    println!("{} trials written to {}", rows.len(), a.out.join("bench.csv").display());
    out.finish("bench", argv, &(a, &base, &values), None, Inputs::default(), started)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    recorded.check_inputs()?;
    let mut argv = vec!["isem".to_string()];
    argv.extend(redirect_out(&recorded.argv, &a.out)?);
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Validation(format!("recorded command: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Validation("cannot replay a replay".into()));
    }
    dispatch(cli.command, &argv[1..])?;
    let fresh = RunManifest::read(&a.out.join(MANIFEST_FILE))?;
    for (name, digest) in &recorded.outputs {
        if fresh.outputs.get(name) != Some(digest) {
            return Err(Error::Mismatch(format!("replayed output {name} differs from the recorded run")));
        }
    }
    println!("replayed {} outputs identically", recorded.outputs.len());
    Ok(())
}
