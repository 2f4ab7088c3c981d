use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use isem_core::cli::{exit_code, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};
use isem_core::dataset::{mean_discounted_return, read_episodes, LearnConfig};
use isem_core::Error;

fn isem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isem"))
        .args(args)
        .env_remove("ISEM_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = isem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn gen(dir: &Path, name: &str, episodes: &str, seed: &str) -> String {
    let out = p(dir, name);
    ok(&["gen-data", "--mini", "--rho", "75", "--episodes", episodes, "--seed", seed, "--out", &out]);
    format!("{out}/episodes.jsonl")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(isem(&[]).status.code(), Some(2));
    assert_eq!(isem(&["frobnicate"]).status.code(), Some(2));
    let out = isem(&["gen-data", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(isem(&["train", "--algo", "sgd", "--train", "a", "--out", "b"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(isem(&["gen-data", "--rho", "100", "--out", &p(dir.path(), "g")]).status.code(), Some(2));
    assert!(isem(&["--help"]).status.success());
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.jsonl");
    fs::write(&bad, "{\"episode_id\": 0}\n").unwrap();
    let out = isem(&["evaluate", "--behavior", "--data", &bad]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let missing = p(dir.path(), "missing.jsonl");
    assert_eq!(isem(&["evaluate", "--behavior", "--data", &missing]).status.code(), Some(3));

    // mini data against the default scenario
    let data = gen(dir.path(), "d", "4", "1");
    let out = isem(&["train", "--algo", "poem", "--train", &data, "--out", &p(dir.path(), "t")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let numeric = Error::Numeric {
        episode: 1,
        agent: 0,
        step: 2,
        what: "x",
    };
    assert_eq!(exit_code(&numeric), EXIT_NUMERIC);
    let wrapped = Error::ThreadFailed {
        thread: 3,
        seed: 9,
        source: Box::new(numeric),
    };
    assert_eq!(exit_code(&wrapped), EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::Domain("d".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::Validation("v".into())), EXIT_DATA);
}

#[test]
fn single_thread_isem_equals_poem() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "40", "2");
    let poem = p(dir.path(), "poem");
    let one = p(dir.path(), "isem1");
    ok(&["train", "--algo", "poem", "--train", &data, "--mini", "--seed", "4", "--out", &poem]);
    ok(&["train", "--algo", "isem", "--threads", "1", "--train", &data, "--mini", "--seed", "4", "--out", &one]);
    let a = fs::read(format!("{poem}/policy.json")).unwrap();
    let b = fs::read(format!("{one}/policy.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn threads_default_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "30", "6");
    let out = p(dir.path(), "t");
    let status = Command::new(env!("CARGO_BIN_EXE_isem"))
        .args(["train", "--algo", "isem", "--train", &data, "--mini", "--max-outer", "1", "--out", &out])
        .env("ISEM_THREADS", "3")
        .output()
        .unwrap();
    assert!(status.status.success());
    let stats = fs::read_to_string(format!("{out}/stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 1 + 3);
    let manifest = fs::read_to_string(format!("{out}/manifest.json")).unwrap();
    assert!(manifest.contains("\"--threads\",\n    \"3\""));
}

#[test]
fn behavior_evaluation_reproduces_mean_return() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "50", "3");
    let stdout = ok(&["evaluate", "--behavior", "--data", &data]);
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let episodes = read_episodes(std::io::BufReader::new(fs::File::open(&data).unwrap())).unwrap();
    let mean = mean_discounted_return(&episodes, &LearnConfig::default()).unwrap();
    assert!((v["value"].as_f64().unwrap() - mean).abs() < 1e-9);
}

#[test]
fn rollout_reports_bounded_returns() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "30", "5");
    let t = p(dir.path(), "t");
    ok(&["train", "--algo", "poem", "--train", &data, "--mini", "--out", &t]);
    let r = p(dir.path(), "r");
    ok(&["rollout", "--policy", &format!("{t}/policy.json"), "--mini", "--episodes", "50", "--out", &r]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{r}/rollout.json")).unwrap()).unwrap();
    let returns = summary["undiscounted"].as_array().unwrap();
    assert_eq!(returns.len(), 50);
    assert!(returns.iter().all(|x| (-3.0..=3.0).contains(&x.as_f64().unwrap())));
    // wrong scenario for this controller
    let out = isem(&["rollout", "--policy", &format!("{t}/policy.json"), "--episodes", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "b");
    ok(&[
        "bench", "--sweep", "m", "--mini", "--values", "1,8", "--seeds", "2", "--test-episodes", "50", "--max-outer", "2",
        "--out", &out,
    ]);
    let text = fs::read_to_string(format!("{out}/bench.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rows.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["algo", "sweep_var", "sweep_value", "seed", "value_mean", "value_stddev", "seed_count"]
    );
    let records: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    // 2 values x 2 seeds x 3 algorithms, then 2 values x 3 aggregates
    assert_eq!(records.len(), 12 + 6);
    let agg: Vec<&csv::StringRecord> = records.iter().filter(|r| &r[3] == "all").collect();
    assert_eq!(agg.len(), 6);
    assert!(agg.iter().all(|r| &r[1] == "m" && &r[6] == "2"));
    // with one thread iSEM is PoEM
    for r in records.iter().filter(|r| &r[2] == "1" && &r[3] != "all") {
        let same: Vec<&csv::StringRecord> = records
            .iter()
            .filter(|s| &s[2] == "1" && s[3] == r[3] && (&s[0] == "poem" || &s[0] == "isem"))
            .collect();
        assert_eq!(same[0][4], same[1][4]);
    }
    // the sweep preset includes eight threads
    assert!(isem_core::cli::bench::SweepVar::M.preset().contains(&8));
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "20", "7");
    let e = p(dir.path(), "e");
    ok(&["evaluate", "--behavior", "--data", &data, "--out", &e]);
    ok(&["replay", "--manifest", &format!("{e}/manifest.json"), "--out", &p(dir.path(), "e2")]);
    assert_eq!(
        fs::read(format!("{e}/value.json")).unwrap(),
        fs::read(p(dir.path(), "e2/value.json")).unwrap()
    );
    let mut text = fs::read_to_string(&data).unwrap();
    text.push('\n');
    fs::write(&data, text).unwrap();
    let out = isem(&["replay", "--manifest", &format!("{e}/manifest.json"), "--out", &p(dir.path(), "e3")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn every_output_directory_has_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d", "5", "8");
    let names: Vec<String> = fs::read_dir(dir.path().join("d"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.as_str() == "manifest.json").count(), 1);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["master_seed"], 8);
    assert!(m["outputs"]["episodes.jsonl"].as_str().unwrap().len() == 64);
}
