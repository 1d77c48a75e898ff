//! Training objectives: denoising score matching, baseline and DiffAug
//! classifiers, noisy and denoising-augmented guidance classifiers.

mod classify;
mod diffaug;
mod dsm;
mod entropy;
mod guidance;

pub use classify::train_classifier;
pub use diffaug::{make_diffaug, DiffAugConfig};
pub use dsm::{dsm_loss, score_relative_error, train_score};
pub use entropy::entropy_curve;
pub use guidance::{
    diffused_accuracy, diffused_eval_inputs, train_da_guidance, train_noisy_guidance, Ablation,
    DiffusedEval,
};

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::f64_digest;
use crate::error::{Error, Result};
use crate::nnet::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of `adam.lr`
    /// (linear decay; 1 keeps it constant).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 256,
            adam: AdamConfig::default(),
            final_lr_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize) -> f64 {
        let frac = if self.steps <= 1 {
            1.0
        } else {
            1.0 - (1.0 - self.final_lr_fraction) * step as f64 / (self.steps - 1) as f64
        };
        self.adam.lr * frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub orig: Option<f64>,
    pub diffaug: Option<f64>,
}

/// Per-step losses. Wall-clock timings are kept apart so the trace itself
/// is reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
    pub wall_ms: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

impl LossTrace {
    pub fn push(&mut self, row: TraceRow, wall_ms: f64) {
        self.rows.push(row);
        self.wall_ms.push(wall_ms);
    }

    pub fn digest(&self) -> String {
        f64_digest(self.rows.iter().map(|r| r.total))
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,orig,diffaug\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{},{}", r.step, r.total, opt(r.orig), opt(r.diffaug));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_ms\n");
        for (r, w) in self.rows.iter().zip(&self.wall_ms) {
            let _ = writeln!(s, "{},{w:.3}", r.step);
        }
        s
    }
}

/// Aborts when the loss stays above 10x its initial value for 500
/// consecutive steps, or turns non-finite.
#[derive(Debug, Default)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: usize = 500;

    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: format!("loss is {loss}") });
        }
        let init = *self.initial.get_or_insert(loss);
        if loss > Self::FACTOR * init {
            self.run += 1;
            if self.run >= Self::PATIENCE {
                return Err(Error::Diverged {
                    step,
                    reason: format!(
                        "loss {loss:e} above {}x initial {init:e} for {} steps",
                        Self::FACTOR,
                        self.run
                    ),
                });
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

pub(crate) fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

pub(crate) fn elapsed_ms(start: std::time::Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_trips_after_patience() {
        let mut g = DivergenceGuard::default();
        g.check(0, 1.0).unwrap();
        for s in 1..DivergenceGuard::PATIENCE {
            g.check(s, 11.0).unwrap();
        }
        assert!(matches!(g.check(999, 11.0), Err(Error::Diverged { .. })));
        let mut g = DivergenceGuard::default();
        g.check(0, 1.0).unwrap();
        assert!(g.check(1, f64::NAN).is_err());
    }

    #[test]
    fn lr_decays_linearly() {
        let c = TrainConfig { steps: 11, final_lr_fraction: 0.0, ..Default::default() };
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(5) - 5e-4).abs() < 1e-15);
        assert_eq!(c.lr_at(10), 0.0);
    }
}
