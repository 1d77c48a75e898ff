use std::path::{Path, PathBuf};

use diffaug::cli::{report, run};
use serde_json::Value;

const TINY: &str = r#"{
  "schema_version": 1,
  "data": {"train_size": 200, "test_size": 200},
  "classifier": {"hidden": [8], "train": {"steps": 60, "batch_size": 32}},
  "analysis": {"n_points": 12},
  "seeds": [0, 1, 2]
}"#;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        Env { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &Path, extra: &[&str]) -> i32 {
        let mut args = vec![
            "diffaug".to_string(),
            "--config".into(),
            self.config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        run(args)
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn summary_values(dir: &Path, metric: &str) -> Vec<f64> {
    read_csv(&dir.join("summary.csv"))
        .into_iter()
        .filter(|r| r[1] == metric)
        .map(|r| r[2].parse().unwrap())
        .collect()
}

#[test]
fn theorem1_run_passes_and_records_hash() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["--seed", "4", "verify-theorem1"]), 0);
    let dir = out.join("verify-theorem1-seed4");
    let t1: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("theorem1.json")).unwrap()).unwrap();
    assert_eq!(t1["all_pass"], Value::Bool(true));
    assert_eq!(t1["n_points"], 12);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(t1["config_hash"], manifest["config_hash"]);
    let csv = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={}", manifest["config_hash"].as_str().unwrap())));
}

#[test]
fn run_dirs_are_append_only() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["--seed", "0", "svd-jacobian"]), 0);
    let before = std::fs::read(out.join("svd-jacobian-seed0/svd.csv")).unwrap();
    assert_eq!(env.run(&out, &["--seed", "0", "svd-jacobian"]), 1);
    assert_eq!(std::fs::read(out.join("svd-jacobian-seed0/svd.csv")).unwrap(), before);
}

#[test]
fn invalid_input_exits_one() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["--override", "analysis.no_such_key=3", "verify-theorem1"]), 1);
    assert_eq!(env.run(&out, &["--override", "analysis.n_points=0", "verify-theorem1"]), 1);
    assert_eq!(env.run(&out, &["no-such-subcommand"]), 1);
    assert_eq!(run(["diffaug", "--config", "/nonexistent.json", "sample"]), 1);
    assert_eq!(run(["diffaug", "--help"]), 0);
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn report_aggregates_mean_and_stdev_over_seeds() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["verify-theorem1"]), 0);
    assert_eq!(env.run(&out, &["train-classifier"]), 0);
    let mut clean = Vec::new();
    for seed in 0..3 {
        let v = summary_values(&out.join(format!("train-classifier-seed{seed}")), "clean_accuracy");
        clean.push(v[0]);
    }
    assert_eq!(env.run(&out, &["report"]), 0);
    let rows = read_csv(&out.join("report/summary.csv"));
    let row = rows
        .iter()
        .find(|r| r[0] == "train-classifier" && r[2] == "clean_accuracy" && r[1] == "variant=baseline")
        .expect("baseline clean accuracy row");
    let m = clean.iter().sum::<f64>() / 3.0;
    let sd = (clean.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert_eq!(row[3], "3");
    assert!((row[4].parse::<f64>().unwrap() - m).abs() < 1e-12);
    assert!((row[5].parse::<f64>().unwrap() - sd).abs() < 1e-12);
    let groups = read_csv(&out.join("report/groups.csv"));
    assert_eq!(groups.len(), 2);
}

#[test]
fn report_refuses_mixed_config_hashes() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["--seed", "0", "verify-theorem1"]), 0);
    assert_eq!(env.run(&out, &["--seed", "1", "--override", "analysis.t_range=[0.1, 1.0]", "verify-theorem1"]), 0);
    assert_eq!(env.run(&out, &["report"]), 1);
    let err = report(&out).unwrap_err().to_string();
    assert!(err.contains("verify-theorem1"), "{err}");
    assert!(err.contains("analysis.t_range"), "{err}");
    assert!(!out.join("report/summary.csv").exists());
}

#[test]
fn report_on_empty_root_is_a_warning() {
    let env = Env::new();
    let out = env.out("nothing-here");
    assert_eq!(env.run(&out, &["report"]), 0);
    assert_eq!(report(&out).unwrap().runs, 0);
}

#[test]
fn seeds_and_out_do_not_change_the_hash() {
    let env = Env::new();
    let a = env.out("a");
    let b = env.out("b");
    assert_eq!(env.run(&a, &["--seed", "0", "verify-theorem1"]), 0);
    assert_eq!(env.run(&b, &["--seed", "7", "verify-theorem1"]), 0);
    let hash = |p: PathBuf| -> String {
        let m: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        m["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(
        hash(a.join("verify-theorem1-seed0/manifest.json")),
        hash(b.join("verify-theorem1-seed7/manifest.json"))
    );
}

#[test]
fn ensemble_at_time_zero_matches_default_mode() {
    let env = Env::new();
    let out = env.out("runs");
    assert_eq!(env.run(&out, &["--seed", "0", "eval-shift"]), 0);
    assert_eq!(env.run(&out, &["--seed", "0", "--override", "ensemble.times=[0.0]", "eval-de"]), 0);
    let by_key = |dir: &str, mode: &str| -> Vec<(String, f64)> {
        read_csv(&out.join(dir).join("shift.csv"))
            .into_iter()
            .filter(|r| r[3] == mode)
            .map(|r| (format!("{}/{}/{}", r[0], r[1], r[2]), r[5].parse().unwrap()))
            .collect()
    };
    let default = by_key("eval-shift-seed0", "default");
    let de = by_key("eval-de-seed0", "de");
    assert_eq!(default.len(), de.len());
    assert!(!default.is_empty());
    for ((ka, a), (kb, b)) in default.iter().zip(&de) {
        assert_eq!(ka, kb);
        assert!((a - b).abs() <= 1e-3, "{ka}: default {a} de {b}");
    }
}
