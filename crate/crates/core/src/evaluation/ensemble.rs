use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, PointClassifier};
use crate::diffusion::{denoise_batch, forward_diffuse_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::score::ScoreModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub times: Vec<f64>,
    pub draws_per_time: usize,
    pub use_x0_scale: bool,
}

impl Default for EnsembleConfig {
    /// `{0, 50, ..., 450} / 999`, one draw per time.
    fn default() -> Self {
        EnsembleConfig {
            times: (0..10).map(|k| DiffusionSchedule::from_grid_time(50 * k)).collect(),
            draws_per_time: 1,
            use_x0_scale: true,
        }
    }
}

impl EnsembleConfig {
    /// `{0, step, 2 step, ...}` up to and including `t_max`.
    pub fn grid(step: f64, t_max: f64) -> Self {
        let n = (t_max / step + 1e-9).floor() as usize;
        EnsembleConfig { times: (0..=n).map(|k| k as f64 * step).collect(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::Config("ensemble needs at least one time".into()));
        }
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("ensemble times must lie in [0, 1]".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ensemble times must be strictly increasing".into()));
        }
        if self.draws_per_time == 0 {
            return Err(Error::Config("draws_per_time must be >= 1".into()));
        }
        Ok(())
    }
}

/// Averaged class probabilities over DiffAug draws at every time in the
/// ensemble. Noise for (row, t, draw) is keyed by the time value, so the
/// order of `times` does not change the draws.
pub fn predict_de(
    clf: &dyn PointClassifier,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Matrix,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<Matrix> {
    cfg.validate()?;
    let (n, d) = x0.shape();
    let mut acc = Matrix::zeros(n, clf.num_classes());
    let total = (cfg.times.len() * cfg.draws_per_time) as f64;
    for &t in &cfg.times {
        for draw in 0..cfg.draws_per_time {
            let mut eps = Matrix::zeros(n, d);
            for i in 0..n {
                let mut r = rng::substream(seed, &[tag::AUGMENT, i as u64, t.to_bits(), draw as u64]);
                for j in 0..d {
                    eps[(i, j)] = rng::normal(&mut r);
                }
            }
            let ts = vec![t; n];
            let x = forward_diffuse_batch(schedule, x0, &ts, &eps)?;
            let den = denoise_batch(schedule, score, &x, &ts)?;
            acc += clf.probs(den.select(cfg.use_x0_scale))?;
        }
    }
    Ok(acc / total)
}

pub fn predict_de_labels(
    clf: &dyn PointClassifier,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Matrix,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    let p = predict_de(clf, schedule, score, x0, cfg, seed)?;
    let y = argmax_rows(&p);
    Ok((p, y))
}
