//! Command-line experiment runner.
//!
//! Each subcommand writes into `<out>/<subcommand>-seed<seed>/` and records
//! a `manifest.json` last, so a directory with a manifest is a finished
//! run. Exit status is 0 on success, 1 for invalid input and 2 for
//! numerical failure.

mod commands;
mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{parse_override, ExperimentConfig};
use crate::error::{Error, Result};

pub use report::{report, ReportSummary};

#[derive(Debug, Parser)]
#[command(name = "diffaug", version, about = "Diffuse-and-denoise experiments on Gaussian-mixture fixtures")]
pub struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run this single seed instead of the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` with a dotted key, applied in order. Values are parsed
    /// as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the score network by denoising score matching.
    TrainScore,
    /// Train baseline and DiffAug classifiers.
    TrainClassifier,
    /// Train noisy and denoising-augmented guidance classifiers.
    TrainGuidance,
    /// Accuracy under the covariate-shift suite.
    EvalShift,
    /// Accuracy of the DiffAug ensemble under the shift suite.
    EvalDe,
    /// Mean prediction entropy against diffusion time.
    EntropyCurve,
    /// Denoised-smoothing certification.
    Certify,
    /// Max-softmax OOD detection.
    Ood,
    /// Denoiser Jacobian against the scaled posterior covariance.
    VerifyTheorem1,
    /// Split the classifier input gradient through the denoiser.
    DecomposeGradient,
    /// Singular spectrum of the denoiser Jacobian.
    SvdJacobian,
    /// Unconditional predictor-corrector samples.
    Sample,
    /// Classifier-guided samples with per-class purity.
    SampleGuided,
    /// Class-conditional precision, recall, density and coverage.
    Prdc,
    /// Aggregate finished runs under the output root.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainScore => "train-score",
            Command::TrainClassifier => "train-classifier",
            Command::TrainGuidance => "train-guidance",
            Command::EvalShift => "eval-shift",
            Command::EvalDe => "eval-de",
            Command::EntropyCurve => "entropy-curve",
            Command::Certify => "certify",
            Command::Ood => "ood",
            Command::VerifyTheorem1 => "verify-theorem1",
            Command::DecomposeGradient => "decompose-gradient",
            Command::SvdJacobian => "svd-jacobian",
            Command::Sample => "sample",
            Command::SampleGuided => "sample-guided",
            Command::Prdc => "prdc",
            Command::Report => "report",
        }
    }
}

/// Output files of one run. CSVs start with a `# config_hash=` line and
/// JSON objects carry a `config_hash` key.
pub(crate) struct RunDir {
    pub path: PathBuf,
    pub hash: String,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: &Path, cmd: Command, seed: u64, hash: &str) -> Result<Self> {
        let path = root.join(format!("{}-seed{seed}", cmd.name()));
        if path.join("manifest.json").exists() {
            return Err(Error::Config(format!(
                "{} already holds a finished run; choose another --out",
                path.display()
            )));
        }
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { path, hash: hash.to_string(), files: Vec::new() })
    }

    fn write_raw(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# config_hash={}\n{body}", self.hash);
        self.write_raw(name, &text)
    }

    pub fn json(&mut self, name: &str, mut value: Value) -> Result<()> {
        if let Value::Object(m) = &mut value {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let text = serde_json::to_string_pretty(&value).expect("value serializes") + "\n";
        self.write_raw(name, &text)
    }

    /// Checkpoints already embed the hash in their training metadata.
    pub fn checkpoint(&mut self, name: &str, ck: &crate::nnet::Checkpoint) -> Result<()> {
        self.write_raw(name, &ck.to_json())
    }
}

/// Long-format summary rows `key,metric,value` merged by `report`.
#[derive(Default)]
pub(crate) struct Summary {
    rows: Vec<(String, String, f64)>,
}

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, metric: &str, value: f64) {
        self.rows.push((key.into(), metric.to_string(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,metric,value\n");
        for (k, m, v) in &self.rows {
            let _ = writeln!(s, "{k},{m},{v}");
        }
        s
    }
}

fn run_once(cmd: Command, cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let start = Instant::now();
    let hash = cfg.hash();
    let mut dir = RunDir::create(&cfg.out, cmd, seed, &hash)?;
    commands::dispatch(cmd, cfg, seed, &mut dir)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = json!({
        "subcommand": cmd.name(),
        "seed": seed,
        "config_hash": hash,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "runtime_ms": start.elapsed().as_secs_f64() * 1e3,
        "created_unix": created,
        "files": dir.files,
        "config": cfg.to_value(),
    });
    let p = dir.path.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")
        .map_err(|e| Error::io(&p, e))?;
    Ok(dir.path)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut overrides = Vec::new();
    for o in &cli.overrides {
        overrides.push(parse_override(o)?);
    }
    if let Some(out) = &cli.out {
        overrides.push(("out".into(), Value::String(out.display().to_string())));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seeds".into(), json!([seed])));
    }
    if cli.command == Command::Report {
        // the config is optional here; only the output root matters
        let root = match (&cli.out, &cli.config) {
            (Some(o), _) => o.clone(),
            (None, Some(_)) => ExperimentConfig::load(cli.config.as_deref(), &overrides)?.out,
            (None, None) => ExperimentConfig::default().out,
        };
        let s = report(&root)?;
        if s.runs == 0 {
            eprintln!("warning: no finished runs under {}; wrote an empty summary", root.display());
        } else {
            println!("{} runs in {} groups -> {}", s.runs, s.groups, s.summary_path.display());
        }
        return Ok(());
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    for &seed in &cfg.seeds {
        let p = run_once(cli.command, &cfg, seed)?;
        println!("{}", p.display());
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
