//! Acceptance suite: one PASS/FAIL line per criterion, tolerances fixed below.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in order
//! and report together. Any failing criterion makes the process fail, except
//! the statistical trend criteria in [`TREND_CRITERIA`], which are reported but
//! only fail the process when `ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use isem_core::behavior::{generate_dataset, BehaviorConfig, MixturePolicy};
use isem_core::cli::bench::{run_trial, TrialConfig, TrialResult};
use isem_core::cli::run_command;
use isem_core::dataset::{
    empirical_value, AgentDecision, AgentTrajectory, Episode, LearnConfig, RMinPolicy, RewardEvent,
};
use isem_core::fsc::{AgentSpec, FscParams, JointFsc};
use isem_core::isem::{isem_train, thread_init};
use isem_core::poem::{e_step, poem_train, PoemConfig};
use isem_core::rng::stream;
use isem_core::sim::{
    run_episode, FscTeam, ObservationVector, OmniscientGreedy, ScenarioConfig, TeamPolicy,
};
use isem_core::stats::{mean, sample_variance, spearman};

/// Relative slack allowed between consecutive lower-bound values.
const LB_REL_TOL: f64 = 1e-9;
/// Absolute tolerance for posterior marginals against enumeration.
const POSTERIOR_TOL: f64 = 1e-10;
/// Relative error allowed for the importance-sampling estimate.
const IS_REL_TOL: f64 = 0.01;

const MONOTONE_SEEDS: u64 = 20;
const POSTERIOR_DRAWS: u64 = 100;
const IS_EPISODES: usize = 100_000;
const TREND_SEEDS: u64 = 10;
const RANDOM_ROLLOUTS: u64 = 1000;

/// Criteria comparing learned-policy estimates across seeds.
const TREND_CRITERIA: [usize; 2] = [5, 6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, started: Instant, limit: Option<Duration>, o: Outcome) -> bool {
    let elapsed = started.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
    println!(
        "{} criterion {id}: {name}: {} [{:.1}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn is_nondecreasing(trace: &[f64], rel: f64) -> bool {
    trace.windows(2).all(|w| w[1] - w[0] >= -rel * w[0].abs())
}

fn mini_data(seed: u64, episodes: usize) -> Vec<Episode> {
    generate_dataset(&BehaviorConfig {
        rho: 0.75,
        episodes,
        master_seed: seed,
        scenario: ScenarioConfig::mini(),
    })
    .expect("dataset generation")
}

fn em_monotonicity() -> Outcome {
    let scenario = ScenarioConfig::mini();
    let specs = scenario.agent_specs(3);
    let results: Vec<(u64, bool, usize)> = (0..MONOTONE_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let data = mini_data(seed, 50);
            let init = thread_init(&specs, 3, seed, 0, 1).unwrap();
            let (_, stats) = poem_train(&init, &data, &LearnConfig::default(), &PoemConfig::default()).unwrap();
            (seed, is_nondecreasing(&stats.lower_bound_trace, LB_REL_TOL), stats.iterations_run)
        })
        .collect();
    let bad: Vec<u64> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let iters: usize = results.iter().map(|r| r.2).sum();
    Outcome {
        pass: bad.is_empty(),
        detail: format!("{MONOTONE_SEEDS} traces, {iters} iterations in total, non-monotone seeds {bad:?}"),
    }
}

fn best_value_monotone(trials: &[(u64, Vec<f64>)]) -> Outcome {
    let bad: Vec<u64> = trials
        .iter()
        .filter(|(_, t)| t.windows(2).any(|w| w[1] < w[0]))
        .map(|(s, _)| *s)
        .collect();
    let outer: usize = trials.iter().map(|(_, t)| t.len()).sum();
    Outcome {
        pass: bad.is_empty() && !trials.is_empty(),
        detail: format!("{} runs, {outer} outer iterations, violations in runs {bad:?}", trials.len()),
    }
}

/// Observation before each decision, aligned with the actions (slot 0 unused).
fn aligned_obs(a: &AgentTrajectory) -> Vec<usize> {
    a.decisions.iter().map(|d| d.obs.unwrap_or(0)).collect()
}

/// Joint probability of an action prefix and a node path.
fn path_probability(p: &FscParams, actions: &[usize], obs: &[usize], path: &[usize]) -> f64 {
    let mut pr = p.mu()[path[0]] * p.lambda0_row(path[0])[actions[0]];
    for i in 1..path.len() {
        pr *= p.delta_row(path[i - 1], obs[i])[path[i]] * p.lambda_row(path[i], obs[i])[actions[i]];
    }
    pr
}

fn node_paths(nq: usize, len: usize) -> Vec<Vec<usize>> {
    (0..nq.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let q = code % nq;
                    code /= nq;
                    q
                })
                .collect()
        })
        .collect()
}

/// Random one-episode problem with up to four decisions per agent.
fn random_instance(draw: u64) -> (JointFsc, Episode) {
    let mut rng = stream(draw, &[0xacce]);
    let agents = rng.random_range(1..=2);
    let specs: Vec<AgentSpec> = (0..agents)
        .map(|n| AgentSpec::new(n, rng.random_range(2..=3), rng.random_range(1..=3), 2))
        .collect();
    let theta = JointFsc::init_dirichlet(&specs, &mut rng).unwrap();
    let length = 8;
    let trajectories = specs
        .iter()
        .map(|s| {
            let t = rng.random_range(1..=4);
            AgentTrajectory {
                agent_id: s.agent_id,
                decisions: (0..t)
                    .map(|i| AgentDecision {
                        start_step: 2 * i as u64,
                        obs: (i > 0).then(|| rng.random_range(0..s.num_observations)),
                        action: rng.random_range(0..s.num_actions),
                        behavior_prob: rng.random_range(0.1..1.0),
                    })
                    .collect(),
            }
        })
        .collect();
    let events = rng.random_range(1..=3);
    let mut times: Vec<u64> = (0..events).map(|_| rng.random_range(0..length)).collect();
    times.sort_unstable();
    let mut rewards: Vec<RewardEvent> = times
        .into_iter()
        .map(|t| RewardEvent {
            t,
            r: if rng.random_bool(0.7) { 1.0 } else { -1.0 },
        })
        .collect();
    rewards[0].r = 1.0;
    let ep = Episode {
        episode_id: draw,
        scenario_digest: String::new(),
        length_steps: length,
        agents: trajectories,
        rewards,
    };
    ep.validate().unwrap();
    (theta, ep)
}

/// Largest deviation between the E-step marginals and enumeration.
fn posterior_error(theta: &JointFsc, ep: &Episode, cfg: &LearnConfig, r_min: f64) -> f64 {
    let (buffers, _) = e_step(theta, std::slice::from_ref(ep), cfg).unwrap();
    let buf = &buffers.episodes[0];
    let prefix_prob = |n: usize, j: usize| {
        let a = &ep.agents[n];
        let p = theta.get(a.agent_id).unwrap();
        let acts = a.actions();
        let obs = aligned_obs(a);
        node_paths(p.num_nodes(), j + 1)
            .iter()
            .map(|path| path_probability(p, &acts[..=j], &obs[..=j], path))
            .sum::<f64>()
    };
    // event weights from first principles
    let events: Vec<(Vec<usize>, f64)> = ep
        .rewards
        .iter()
        .map(|e| {
            let last: Vec<usize> = ep.agents.iter().map(|a| a.last_decision_at(e.t)).collect();
            let mut w = cfg.gamma.powf(e.t as f64) * (e.r - r_min);
            for (n, &j) in last.iter().enumerate() {
                let b: f64 = ep.agents[n].decisions[..=j].iter().map(|d| d.behavior_prob).product();
                w *= prefix_prob(n, j) / b;
            }
            (last, w)
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (n, a) in ep.agents.iter().enumerate() {
        let p = theta.get(a.agent_id).unwrap();
        let nq = p.num_nodes();
        let acts = a.actions();
        let obs = aligned_obs(a);
        let len = acts.len();
        let mut phi = vec![vec![0.0; nq]; len];
        let mut xi = vec![vec![0.0; nq * nq]; len];
        let mut mass = vec![0.0; len];
        for (last, w) in &events {
            let j = last[n];
            let paths = node_paths(nq, j + 1);
            let probs: Vec<f64> = paths.iter().map(|q| path_probability(p, &acts[..=j], &obs[..=j], q)).collect();
            let z: f64 = probs.iter().sum();
            for (path, pr) in paths.iter().zip(&probs) {
                let post = w * pr / z;
                for i in 0..=j {
                    phi[i][path[i]] += post;
                    if i > 0 {
                        xi[i][path[i - 1] * nq + path[i]] += post;
                    }
                }
            }
            for m in mass.iter_mut().take(j + 1) {
                *m += w;
            }
        }
        let ab = &buf.agents[n];
        for i in 0..len {
            if mass[i] == 0.0 {
                continue;
            }
            for q in 0..nq {
                worst = worst.max((phi[i][q] / mass[i] - ab.phi(i)[q]).abs());
            }
            if i > 0 {
                for c in 0..nq * nq {
                    worst = worst.max((xi[i][c] / mass[i] - ab.xi(i)[c]).abs());
                }
            }
        }
    }
    worst
}

fn posterior_oracle() -> Outcome {
    let cfg = LearnConfig {
        gamma: 0.9,
        r_min: RMinPolicy::Explicit(-1.0),
        ..LearnConfig::default()
    };
    let worst = (0..POSTERIOR_DRAWS)
        .map(|d| {
            let (theta, ep) = random_instance(d);
            posterior_error(&theta, &ep, &cfg, -1.0)
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: worst <= POSTERIOR_TOL,
        detail: format!("{POSTERIOR_DRAWS} draws, max |error| {worst:.3e} (tol {POSTERIOR_TOL:e})"),
    }
}

fn estimator_consistency() -> Outcome {
    // one decision over four actions with deterministic rewards
    let behavior = [0.3, 0.3, 0.2, 0.2];
    let target = [0.4, 0.4, 0.1, 0.1];
    let reward = [1.0, 1.0, -1.0, -1.0];
    let truth: f64 = target.iter().zip(&reward).map(|(t, r)| t * r).sum();
    let spec = AgentSpec::new(0, 4, 1, 1);
    let policy = JointFsc::new(vec![FscParams::from_parts(
        spec,
        vec![1.0],
        target.to_vec(),
        target.to_vec(),
        vec![1.0],
    )
    .unwrap()])
    .unwrap();
    let mut rng = stream(2024, &[]);
    let episodes: Vec<Episode> = (0..IS_EPISODES as u64)
        .map(|id| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let a = behavior
                .iter()
                .position(|b| {
                    acc += b;
                    u < acc
                })
                .unwrap_or(3);
            Episode {
                episode_id: id,
                scenario_digest: String::new(),
                length_steps: 1,
                agents: vec![AgentTrajectory {
                    agent_id: 0,
                    decisions: vec![AgentDecision {
                        start_step: 0,
                        obs: None,
                        action: a,
                        behavior_prob: behavior[a],
                    }],
                }],
                rewards: vec![RewardEvent { t: 0, r: reward[a] }],
            }
        })
        .collect();
    let v = empirical_value(&episodes, &policy, &LearnConfig::default()).unwrap();
    let direct: f64 = episodes
        .iter()
        .map(|e| {
            let a = e.agents[0].decisions[0].action;
            target[a] / behavior[a] * reward[a]
        })
        .sum::<f64>()
        / IS_EPISODES as f64;
    let rel = (v - truth).abs() / truth.abs();
    Outcome {
        pass: rel <= IS_REL_TOL && (v - direct).abs() < 1e-12,
        detail: format!(
            "K = {IS_EPISODES}, estimate {v:.5} (plain ratio mean {direct:.5}) vs analytic {truth:.5}, relative error {rel:.4}"
        ),
    }
}

fn isem_vs_poem(trials: &[TrialResult]) -> Outcome {
    let p: Vec<f64> = trials.iter().map(|t| t.poem_value).collect();
    let i: Vec<f64> = trials.iter().map(|t| t.isem_value).collect();
    let (mp, mi) = (mean(&p), mean(&i));
    let (vp, vi) = (sample_variance(&p), sample_variance(&i));
    Outcome {
        pass: mi >= mp && vi <= vp,
        detail: format!(
            "{} seeds, mean test value iSEM {mi:.4} vs PoEM {mp:.4}, variance iSEM {vi:.4} vs PoEM {vp:.4}",
            trials.len()
        ),
    }
}

fn data_scaling(sizes: &[usize], by_size: &[Vec<TrialResult>]) -> Outcome {
    let mut ks = Vec::new();
    let (mut p, mut i) = (Vec::new(), Vec::new());
    let mut means = Vec::new();
    for (&k, trials) in sizes.iter().zip(by_size) {
        for t in trials {
            ks.push(k as f64);
            p.push(t.poem_value);
            i.push(t.isem_value);
        }
        let mp = mean(&trials.iter().map(|t| t.poem_value).collect::<Vec<_>>());
        let mi = mean(&trials.iter().map(|t| t.isem_value).collect::<Vec<_>>());
        means.push(format!("K={k}: PoEM {mp:.3} iSEM {mi:.3}"));
    }
    let (rp, ri) = (spearman(&ks, &p), spearman(&ks, &i));
    Outcome {
        pass: rp >= 0.0 && ri >= 0.0,
        detail: format!("Spearman(K, value) PoEM {rp:.3}, iSEM {ri:.3}; {}", means.join(", ")),
    }
}

fn simulator_bounds() -> Outcome {
    let full = ScenarioConfig::default();
    let returns: Vec<f64> = (0..RANDOM_ROLLOUTS)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(i, &[0x5151]);
            let out = if i % 2 == 0 {
                let theta = JointFsc::init_dirichlet(&full.agent_specs(1 + (i as usize / 2) % 4), &mut rng).unwrap();
                let mut team = FscTeam::new(&theta);
                run_episode(&full, &mut team, i, 0.999, &mut rng)
            } else {
                let mut team = MixturePolicy { rho: 0.0 };
                run_episode(&full, &mut team as &mut dyn TeamPolicy, i, 0.999, &mut rng)
            };
            out.unwrap().undiscounted_return
        })
        .collect();
    let in_range = returns.iter().all(|r| (-6.0..=6.0).contains(r));
    let generous = ScenarioConfig {
        obs_noise_prob: 0.0,
        comm_fail_prob: 0.0,
        health_min: 1.0,
        health_max: 1.0,
        degradation: 0.0005,
        max_steps: 2000,
        ..ScenarioConfig::default()
    };
    let greedy: Vec<f64> = (0..5)
        .map(|s| {
            run_episode(&generous, &mut OmniscientGreedy, 0, 1.0 - 1e-9, &mut stream(s, &[]))
                .unwrap()
                .undiscounted_return
        })
        .collect();
    let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        pass: in_range && greedy.iter().all(|&g| g == 6.0),
        detail: format!(
            "{RANDOM_ROLLOUTS} random-policy returns in [{lo}, {hi}]; greedy returns {greedy:?}"
        ),
    }
}

fn codec_identity() -> Outcome {
    let s = 6;
    let n = ScenarioConfig::default().num_observations();
    let bad = (0..n)
        .filter(|&i| ObservationVector::decode(i, s).and_then(|v| v.encode(s)).ok() != Some(i))
        .count();
    let rejects = ObservationVector::decode(n, s).is_err();
    Outcome {
        pass: n == 648 && bad == 0 && rejects,
        detail: format!("{n} codes, {bad} round-trip failures, out-of-range code rejected: {rejects}"),
    }
}

fn run_cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("isem").chain(args.iter().copied()).map(String::from).collect();
    run_command(argv)
}

fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    for entry in std::fs::read_dir(a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        if name == "manifest.json" {
            continue;
        }
        let x = std::fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&name)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
        n += 1;
    }
    Ok(n)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let data = d("data");
    let train = d("train");
    let eval = d("eval");
    let episodes = format!("{data}/episodes.jsonl");
    let policy = format!("{train}/policy.json");
    let steps: [(&str, Vec<&str>); 3] = [
        ("gen-data", vec!["gen-data", "--mini", "--rho", "75", "--episodes", "60", "--seed", "5", "--out", &data]),
        (
            "train",
            vec!["train", "--algo", "isem", "--train", &episodes, "--mini", "--threads", "4", "--seed", "5", "--out", &train],
        ),
        ("evaluate", vec!["evaluate", "--policy", &policy, "--data", &episodes, "--out", &eval]),
    ];
    for (name, args) in &steps {
        let code = run_cli(args);
        if code != 0 {
            return Outcome {
                pass: false,
                detail: format!("{name} exited with {code}"),
            };
        }
    }
    let mut compared = 0;
    for dir_name in [&data, &train, &eval] {
        let replayed = format!("{dir_name}_replay");
        let manifest = format!("{dir_name}/manifest.json");
        let code = run_cli(&["replay", "--manifest", &manifest, "--out", &replayed]);
        if code != 0 {
            return Outcome {
                pass: false,
                detail: format!("replay of {manifest} exited with {code}"),
            };
        }
        match same_outputs(Path::new(dir_name), Path::new(&replayed)) {
            Ok(n) => compared += n,
            Err(e) => {
                return Outcome {
                    pass: false,
                    detail: e,
                }
            }
        }
    }
    Outcome {
        pass: compared >= 6,
        detail: format!("gen-data, train --algo isem and evaluate replayed; {compared} output files byte-identical"),
    }
}

fn main() {
    let mut results: Vec<(usize, bool)> = Vec::new();

    let t = Instant::now();
    results.push((1, report(1, "EM lower bound is monotone", t, Some(Duration::from_secs(60)), em_monotonicity())));

    // shared trials on the reduced benchmark
    let base = TrialConfig::mini();
    let t5 = Instant::now();
    let trials: Vec<TrialResult> = (0..TREND_SEEDS).map(|s| run_trial(&base, s).unwrap()).collect();
    let t5_elapsed = t5.elapsed();

    let t = Instant::now();
    let runs: Vec<(u64, Vec<f64>)> = (0..TREND_SEEDS)
        .map(|seed| {
            let scenario = ScenarioConfig::mini();
            let data = mini_data(seed, 100);
            let (train, eval) = data.split_at(80);
            let cfg = TrialConfig::mini().isem_config(seed);
            let (_, state) = isem_train(&scenario.agent_specs(3), train, eval, &cfg).unwrap();
            (seed, state.best_trace)
        })
        .collect();
    results.push((2, report(2, "best evaluation value never decreases across iSEM iterations", t, None, best_value_monotone(&runs))));

    let t = Instant::now();
    results.push((3, report(3, "E-step posteriors match enumeration", t, Some(Duration::from_secs(10)), posterior_oracle())));

    let t = Instant::now();
    results.push((4, report(4, "off-policy estimate matches analytic value", t, None, estimator_consistency())));

    let t = Instant::now() - t5_elapsed;
    results.push((5, report(5, "iSEM beats single-run PoEM on held-out data", t, Some(Duration::from_secs(900)), isem_vs_poem(&trials))));

    let t = Instant::now();
    let sizes = [50, 100, 500];
    let by_size: Vec<Vec<TrialResult>> = sizes
        .iter()
        .map(|&k| {
            let cfg = TrialConfig { episodes: k, ..TrialConfig::mini() };
            (0..TREND_SEEDS).map(|s| run_trial(&cfg, s).unwrap()).collect()
        })
        .collect();
    results.push((6, report(6, "test value grows with training set size", t, None, data_scaling(&sizes, &by_size))));

    let t = Instant::now();
    results.push((7, report(7, "simulator return bounds", t, None, simulator_bounds())));

    let t = Instant::now();
    results.push((8, report(8, "observation codec round trip", t, None, codec_identity())));

    let t = Instant::now();
    results.push((9, report(9, "runs replay byte-for-byte from manifests", t, None, determinism())));

    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let blocking: Vec<usize> = failed
        .iter()
        .copied()
        .filter(|c| strict || !TREND_CRITERIA.contains(c))
        .collect();
    println!(
        "acceptance: {} of {} criteria passed; failed {failed:?}{}",
        results.len() - failed.len(),
        results.len(),
        if blocking.is_empty() && !failed.is_empty() { " (trend criteria only, not blocking)" } else { "" }
    );
    if !blocking.is_empty() {
        std::process::exit(1);
    }
}
