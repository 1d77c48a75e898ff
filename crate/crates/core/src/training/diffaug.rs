use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_batch, forward_diffuse_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gmm::LabeledExample;
use crate::linalg::{row, Matrix};
use crate::rng;
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffAugConfig {
    pub t_range: [f64; 2],
    /// Weight on the clean-data loss; the augmented loss gets the rest.
    pub combine_weight: f64,
    pub use_x0_scale: bool,
    pub samples_per_example: usize,
}

impl Default for DiffAugConfig {
    fn default() -> Self {
        DiffAugConfig {
            t_range: [0.0, 1.0],
            combine_weight: 0.5,
            use_x0_scale: true,
            samples_per_example: 1,
        }
    }
}

impl DiffAugConfig {
    /// Low-noise half `[0, 0.5]`.
    pub fn lower_half() -> Self {
        DiffAugConfig { t_range: [0.0, 0.5], ..Default::default() }
    }

    /// High-noise half `[0.5, 1]`.
    pub fn upper_half() -> Self {
        DiffAugConfig { t_range: [0.5, 1.0], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!("t_range [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.combine_weight) {
            return Err(Error::Config("combine_weight must lie in [0, 1]".into()));
        }
        if self.samples_per_example == 0 {
            return Err(Error::Config("samples_per_example must be >= 1".into()));
        }
        Ok(())
    }

    fn draw_time(&self, r: &mut impl Rng) -> f64 {
        rng::uniform(r, self.t_range[0], self.t_range[1])
    }
}

/// Augments every row of `x0` once. Returns the augmented points and the
/// times used.
pub(crate) fn diffaug_rows(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Matrix,
    cfg: &DiffAugConfig,
    r: &mut impl Rng,
) -> Result<(Matrix, Vec<f64>)> {
    let n = x0.nrows();
    let t: Vec<f64> = (0..n).map(|_| cfg.draw_time(r)).collect();
    let eps = Matrix::from_fn(n, x0.ncols(), |_, _| rng::normal(r));
    let x = forward_diffuse_batch(schedule, x0, &t, &eps)?;
    let d = denoise_batch(schedule, score, &x, &t)?;
    let out = if cfg.use_x0_scale { d.x0_scale } else { d.x_hat };
    Ok((out, t))
}

/// Diffuse to `t ~ U(t_lo, t_hi)` then denoise in one step; the label is
/// carried over unchanged.
pub fn make_diffaug(
    example: &LabeledExample,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    cfg: &DiffAugConfig,
    r: &mut impl Rng,
) -> Result<LabeledExample> {
    cfg.validate()?;
    let x0 = Matrix::from_row_slice(1, example.x0.len(), example.x0.as_slice());
    let (aug, _) = diffaug_rows(schedule, score, &x0, cfg, r)?;
    Ok(LabeledExample { x0: row(&aug, 0), ..example.clone() })
}
