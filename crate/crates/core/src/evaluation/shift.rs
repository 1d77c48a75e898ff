use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ensemble::{predict_de, EnsembleConfig};
use crate::classifier::{accuracy, argmax_rows, PointClassifier};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::gmm::Dataset;
use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    AdditiveNoise,
    Rotation,
    Translation,
    Scaling,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::AdditiveNoise,
        ShiftKind::Rotation,
        ShiftKind::Translation,
        ShiftKind::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::AdditiveNoise => "additive-noise",
            ShiftKind::Rotation => "rotation",
            ShiftKind::Translation => "translation",
            ShiftKind::Scaling => "scaling",
        }
    }

    /// Magnitude per severity step: noise stdev, degrees, data units along
    /// the diagonal, and relative scale change.
    pub fn unit(self) -> f64 {
        match self {
            ShiftKind::AdditiveNoise => 0.25,
            ShiftKind::Rotation => 12.0,
            ShiftKind::Translation => 0.3,
            ShiftKind::Scaling => 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// 0 is the identity, 1..=5 the calibrated levels.
    pub severity: u32,
}

impl ShiftSpec {
    pub const MAX_SEVERITY: u32 = 5;

    pub fn new(kind: ShiftKind, severity: u32) -> Result<Self> {
        let s = ShiftSpec { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > Self::MAX_SEVERITY {
            return Err(Error::Config(format!(
                "severity {} outside 0..={}",
                self.severity,
                Self::MAX_SEVERITY
            )));
        }
        Ok(())
    }

    pub fn magnitude(&self) -> f64 {
        self.kind.unit() * self.severity as f64
    }

    /// Every kind at every severity in `levels`.
    pub fn suite(levels: impl IntoIterator<Item = u32> + Clone) -> Vec<ShiftSpec> {
        ShiftKind::ALL
            .iter()
            .flat_map(|&k| levels.clone().into_iter().map(move |s| ShiftSpec { kind: k, severity: s }))
            .collect()
    }

    pub fn apply(&self, x: &Matrix, seed: u64) -> Result<Matrix> {
        self.validate()?;
        Ok(apply_shift(self.kind, self.magnitude(), x, seed))
    }
}

/// Applies a shift of arbitrary magnitude. Rotation acts on the first two
/// coordinates about the origin.
pub fn apply_shift(kind: ShiftKind, magnitude: f64, x: &Matrix, seed: u64) -> Matrix {
    let (n, d) = x.shape();
    let mut out = x.clone();
    match kind {
        ShiftKind::AdditiveNoise => {
            for i in 0..n {
                let mut r = rng::substream(seed, &[tag::SHIFT, i as u64]);
                for j in 0..d {
                    out[(i, j)] += magnitude * rng::normal(&mut r);
                }
            }
        }
        ShiftKind::Rotation if d >= 2 => {
            let (s, c) = magnitude.to_radians().sin_cos();
            for i in 0..n {
                let (a, b) = (x[(i, 0)], x[(i, 1)]);
                out[(i, 0)] = c * a - s * b;
                out[(i, 1)] = s * a + c * b;
            }
        }
        ShiftKind::Rotation => {}
        ShiftKind::Translation => {
            let step = magnitude / (d as f64).sqrt();
            out.add_scalar_mut(step);
        }
        ShiftKind::Scaling => out *= 1.0 + magnitude,
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Default,
    De,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Default => "default",
            EvalMode::De => "de",
        }
    }
}

/// Everything the DiffAug ensemble needs beyond the classifier.
pub struct DeContext<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub score: &'a dyn ScoreModel,
    pub config: &'a EnsembleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftRow {
    pub shift: ShiftKind,
    pub severity: u32,
    pub mode: EvalMode,
    pub seed: u64,
    pub accuracy: f64,
}

pub const SHIFT_CSV_HEADER: &str = "shift,severity,mode,seed,accuracy";

pub fn shift_rows_csv(rows: &[ShiftRow]) -> String {
    let mut s = format!("{SHIFT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6}", r.shift.name(), r.severity, r.mode.name(), r.seed, r.accuracy);
    }
    s
}

pub fn predict_mode(
    clf: &dyn PointClassifier,
    x: &Matrix,
    mode: EvalMode,
    de: Option<&DeContext>,
    seed: u64,
) -> Result<Vec<usize>> {
    match mode {
        EvalMode::Default => Ok(argmax_rows(&clf.probs(x)?)),
        EvalMode::De => {
            let de = de.ok_or_else(|| Error::Config("DE mode needs a score and ensemble config".into()))?;
            Ok(argmax_rows(&predict_de(clf, de.schedule, de.score, x, de.config, seed)?))
        }
    }
}

/// Accuracy for every (shift, mode). Shifted points depend only on the
/// shift and `seed`, so all modes and classifiers see the same inputs.
pub fn shift_eval(
    clf: &dyn PointClassifier,
    data: &Dataset,
    shifts: &[ShiftSpec],
    modes: &[EvalMode],
    de: Option<&DeContext>,
    seed: u64,
) -> Result<Vec<ShiftRow>> {
    let mut rows = Vec::new();
    for sh in shifts {
        let x = sh.apply(&data.points, seed)?;
        for &mode in modes {
            let pred = predict_mode(clf, &x, mode, de, seed)?;
            rows.push(ShiftRow {
                shift: sh.kind,
                severity: sh.severity,
                mode,
                seed,
                accuracy: accuracy(&pred, &data.labels),
            });
        }
    }
    Ok(rows)
}

/// Expected accuracy of predictions independent of the truth with the
/// same marginals: `sum_c P(y = c) P(pred = c)`.
pub fn chance_accuracy(labels: &[usize], pred: &[usize], classes: usize) -> f64 {
    let n = labels.len() as f64;
    let mut fy = vec![0.0; classes];
    let mut fp = vec![0.0; classes];
    for (&y, &p) in labels.iter().zip(pred) {
        fy[y] += 1.0 / n;
        fp[p] += 1.0 / n;
    }
    fy.iter().zip(&fp).map(|(a, b)| a * b).sum()
}
