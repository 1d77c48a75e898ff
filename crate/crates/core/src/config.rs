//! Experiment configuration: one JSON document drives every subcommand.
//!
//! Unknown keys are rejected everywhere. Missing keys take the defaults
//! below, so `{"schema_version": 1}` is a complete config. Training seeds
//! are not part of the config; they come from the run seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{DiffusionSchedule, PcConfig};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::evaluation::{CertifyParams, EnsembleConfig, EvalMode, OodMode, ShiftKind};
use crate::guided::{GuidanceKind, ScalePlacement};
use crate::nnet::AdamConfig;
use crate::training::{DiffAugConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Mixture fixture file; the built-in canonical mixture when absent.
    pub fixture: Option<PathBuf>,
    pub schedule: DiffusionSchedule,
    pub data: DataConfig,
    pub score: ScoreConfig,
    pub classifier: ClassifierConfig,
    pub diffaug: DiffAugConfig,
    pub ensemble: EnsembleConfig,
    pub shift: ShiftConfig,
    pub entropy: EntropyConfig,
    pub certify: CertifyConfig,
    pub ood: OodConfig,
    pub analysis: AnalysisConfig,
    pub guidance: GuidanceBlock,
    pub sampling: SamplingConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            fixture: None,
            schedule: DiffusionSchedule::vp_default(),
            data: DataConfig::default(),
            score: ScoreConfig::default(),
            classifier: ClassifierConfig::default(),
            diffaug: DiffAugConfig::default(),
            ensemble: EnsembleConfig::default(),
            shift: ShiftConfig::default(),
            entropy: EntropyConfig::default(),
            certify: CertifyConfig::default(),
            ood: OodConfig::default(),
            analysis: AnalysisConfig::default(),
            guidance: GuidanceBlock::default(),
            sampling: SamplingConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

/// Train/test draws. The training set for run seed `s` uses stream
/// `train_seed + s`; the test set is shared by all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub train_seed: u64,
    pub test_size: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_size: 2000, train_seed: 100, test_size: 4000, test_seed: 999 }
    }
}

/// Optimizer settings without a seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub final_lr_fraction: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainBlock { steps: t.steps, batch_size: t.batch_size, adam: t.adam, final_lr_fraction: t.final_lr_fraction }
    }
}

impl TrainBlock {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: self.adam,
            final_lr_fraction: self.final_lr_fraction,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Analytic,
    Train,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Where the score used by downstream subcommands comes from.
    pub source: ScoreSource,
    pub checkpoint: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub emb_width: usize,
    pub train_size: usize,
    pub train: TrainBlock,
    /// Test points for the relative-error check after training.
    pub eval_points: usize,
    pub eval_sigma: [f64; 2],
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            source: ScoreSource::Analytic,
            checkpoint: None,
            hidden: vec![128, 128, 128],
            emb_width: 32,
            train_size: 20_000,
            train: TrainBlock { steps: 8000, batch_size: 256, final_lr_fraction: 0.05, ..Default::default() },
            eval_points: 1000,
            eval_sigma: [0.1, 3.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Diffaug,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Diffaug => "diffaug",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub train: TrainBlock,
    pub variants: Vec<Variant>,
    /// Directory written by `train-classifier`; classifiers are trained
    /// in place when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![64, 64],
            train: TrainBlock { steps: 3000, batch_size: 128, ..Default::default() },
            variants: vec![Variant::Baseline, Variant::Diffaug],
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub kinds: Vec<ShiftKind>,
    pub severities: Vec<u32>,
    pub modes: Vec<EvalMode>,
    /// Upper ends of DE grids `{0, 50, ..}/999` for the hyperparameter sweep
    /// in `eval-de`; empty skips it.
    pub de_sweep_t_max: Vec<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            kinds: ShiftKind::ALL.to_vec(),
            severities: vec![3, 4, 5],
            modes: vec![EvalMode::Default, EvalMode::De],
            de_sweep_t_max: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub t_grid: Vec<f64>,
    pub use_x0_scale: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { t_grid: (0..=10).map(|k| k as f64 / 10.0).collect(), use_x0_scale: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub sigmas: Vec<f64>,
    pub n_examples: usize,
    pub params: CertifyParams,
    pub radii: Vec<f64>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            sigmas: vec![0.25, 0.5, 1.0],
            n_examples: 100,
            params: CertifyParams::default(),
            radii: (0..=12).map(|k| k as f64 * 0.25).collect(),
        }
    }
}

/// Out-of-distribution set: the fixture translated by `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub offset: Vec<f64>,
    pub modes: Vec<OodMode>,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig { offset: vec![0.0, -5.0], modes: vec![OodMode::Clean, OodMode::Diffaug { t: 0.3 }] }
    }
}

/// Query points for `verify-theorem1`, `decompose-gradient`, `svd-jacobian`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_points: usize,
    pub t_range: [f64; 2],
    pub tolerance: f64,
    pub query_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { n_points: 200, t_range: [0.05, 1.0], tolerance: 1e-4, query_seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceBlock {
    pub hidden: Vec<usize>,
    pub emb_width: usize,
    pub train_size: usize,
    pub train: TrainBlock,
    pub kinds: Vec<GuidanceKind>,
    pub lambda_s: f64,
    pub scale_placement: ScalePlacement,
    pub per_class: usize,
    pub pc: PcConfig,
    pub prdc_k: usize,
    pub time_buckets: usize,
    /// Directory written by `train-guidance`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for GuidanceBlock {
    fn default() -> Self {
        GuidanceBlock {
            hidden: vec![64, 64],
            emb_width: 32,
            train_size: 4000,
            train: TrainBlock { steps: 3000, batch_size: 128, ..Default::default() },
            kinds: vec![GuidanceKind::Noisy, GuidanceKind::DenoisingAugmented],
            lambda_s: 1.0,
            scale_placement: ScalePlacement::OnClassifierGradient,
            per_class: 500,
            pc: PcConfig { n_steps: 250, ..Default::default() },
            prdc_k: 5,
            time_buckets: 10,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_chains: usize,
    pub pc: PcConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_chains: 2000, pc: PcConfig { n_steps: 200, ..Default::default() } }
    }
}

/// Parses `key=value`; the value is JSON when it parses as JSON and a
/// plain string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted path, creating intermediate objects.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl ExperimentConfig {
    /// Parses a config document after applying overrides in order.
    pub fn from_json_with(text: &str, overrides: &[(String, Value)], origin: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        if !doc.is_object() {
            return Err(Error::Config(format!("{origin}: top level must be an object")));
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v.clone())?;
        }
        // Round-trip through text so errors carry line and column.
        let pretty = serde_json::to_string_pretty(&doc).expect("value serializes");
        let cfg: ExperimentConfig = serde_json::from_str(&pretty).map_err(|e| {
            let ctx = if overrides.is_empty() { origin.to_string() } else { format!("{origin} (after overrides)") };
            Error::json(ctx, e)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json_with(&text, overrides, &p.display().to_string())
            }
            None => Self::from_json_with(&format!("{{\"schema_version\": {SCHEMA_VERSION}}}"), overrides, "<defaults>"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        self.schedule.validate()?;
        self.diffaug.validate()?;
        self.ensemble.validate()?;
        self.certify.params.validate()?;
        self.guidance.pc.validate()?;
        self.sampling.pc.validate()?;
        for tb in [&self.score.train, &self.classifier.train, &self.guidance.train] {
            tb.with_seed(0).validate()?;
        }
        if self.score.source == ScoreSource::Checkpoint && self.score.checkpoint.is_none() {
            return Err(Error::Config("score.source = checkpoint needs score.checkpoint".into()));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("data sizes must be >= 1".into()));
        }
        for (key, n) in [
            ("score.train_size", self.score.train_size),
            ("score.eval_points", self.score.eval_points),
            ("certify.n_examples", self.certify.n_examples),
            ("analysis.n_points", self.analysis.n_points),
            ("guidance.train_size", self.guidance.train_size),
            ("guidance.per_class", self.guidance.per_class),
            ("guidance.time_buckets", self.guidance.time_buckets),
            ("sampling.n_chains", self.sampling.n_chains),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
        }
        let [lo, hi] = self.analysis.t_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("analysis.t_range [{lo}, {hi}] must lie in [0, 1]")));
        }
        let [slo, shi] = self.score.eval_sigma;
        if !(slo > 0.0 && slo < shi) {
            return Err(Error::Config("score.eval_sigma must satisfy 0 < lo < hi".into()));
        }
        if self.shift.severities.iter().any(|&s| s > crate::evaluation::ShiftSpec::MAX_SEVERITY) {
            return Err(Error::Config("shift.severities must lie in 0..=5".into()));
        }
        if self.entropy.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("entropy.t_grid must be strictly increasing".into()));
        }
        if self.certify.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("certify.sigmas must be > 0".into()));
        }
        Ok(())
    }

    /// Canonical JSON value of the config.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Digest of the canonical config without `seeds` and `out`, so runs
    /// of one experiment under different seeds share a hash.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Value::Object(m) = &mut v {
            m.remove("seeds");
            m.remove("out");
        }
        // serde_json maps are ordered by key, which makes this canonical
        sha256_hex(serde_json::to_string(&v).expect("value serializes").as_bytes())
    }
}

/// Dotted paths whose values differ between two documents.
pub fn value_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(ma), Value::Object(mb)) => {
                let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (ma.get(k), mb.get(k)) {
                        (Some(x), Some(y)) => walk(x, y, &p, out),
                        (x, y) => out.push(format!("{p}: {} vs {}", show(x), show(y))),
                    }
                }
            }
            _ if a != b => out.push(format!("{path}: {a} vs {b}")),
            _ => {}
        }
    }
    fn show(v: Option<&Value>) -> String {
        v.map_or("<missing>".into(), |v| v.to_string())
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let c = ExperimentConfig::from_json_with(r#"{"schema_version": 1}"#, &[], "t").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let e = ExperimentConfig::from_json_with("{\n  \"schema_version\": 1,\n  \"sedes\": [1]\n}", &[], "t")
            .unwrap_err()
            .to_string();
        assert!(e.contains("sedes") && e.contains("line 3"), "{e}");
        let e = ExperimentConfig::from_json_with(r#"{"data": {"train_sise": 3}}"#, &[], "t").unwrap_err();
        assert!(e.to_string().contains("train_sise"));
    }

    #[test]
    fn overrides_apply_on_dotted_paths() {
        let ov = vec![
            parse_override("data.train_size=17").unwrap(),
            parse_override("schedule={\"kind\":\"ve\",\"sigma_min\":0.01,\"sigma_max\":5}").unwrap(),
            parse_override("out=somewhere").unwrap(),
        ];
        let c = ExperimentConfig::from_json_with("{}", &ov, "t").unwrap();
        assert_eq!(c.data.train_size, 17);
        assert!(c.schedule.is_ve());
        assert_eq!(c.out, PathBuf::from("somewhere"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![4, 5];
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.data.train_size += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(value_diff(&a.to_value(), &b.to_value()).len(), 3);
    }

    #[test]
    fn bad_schema_version_is_rejected() {
        assert!(ExperimentConfig::from_json_with(r#"{"schema_version": 2}"#, &[], "t").is_err());
        assert!(ExperimentConfig::from_json_with(r#"{"seeds": []}"#, &[], "t").is_err());
    }
}
