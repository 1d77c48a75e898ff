use rand::Rng;

use super::schedule::DiffusionSchedule;
use crate::error::{check_time, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::nnet::{Tape, Var};
use crate::rng;
use crate::score::ScoreModel;

/// `mean_coeff` below which rescaling to data scale is refused.
pub const MIN_MEAN_COEFF: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x: Vector,
    pub t: f64,
    pub origin_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedSample {
    /// Estimate of `E[m_t | x]` on the mean scale.
    pub x_hat: Vector,
    /// `x_hat / mean_coeff(t)`, on the data scale.
    pub x0_scale: Vector,
    pub t: f64,
}

/// Denoised batch, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedBatch {
    pub x_hat: Matrix,
    pub x0_scale: Matrix,
}

impl DenoisedBatch {
    pub fn select(&self, x0_scale: bool) -> &Matrix {
        if x0_scale {
            &self.x0_scale
        } else {
            &self.x_hat
        }
    }
}

pub fn forward_diffuse(
    schedule: &DiffusionSchedule,
    x0: &Vector,
    t: f64,
    rng: &mut impl Rng,
) -> Result<NoisySample> {
    let m = schedule.mean_coeff(t)?;
    let s = schedule.sigma(t)?;
    let eps = Vector::from_vec(rng::normal_vec(rng, x0.len()));
    Ok(NoisySample {
        x: x0 * m + eps * s,
        t,
        origin_index: None,
    })
}

/// `x = m(t_i) x0_i + sigma(t_i) noise_i` row-wise.
pub fn forward_diffuse_batch(
    schedule: &DiffusionSchedule,
    x0: &Matrix,
    t: &[f64],
    noise: &Matrix,
) -> Result<Matrix> {
    if x0.shape() != noise.shape() || x0.nrows() != t.len() {
        return Err(Error::Shape("forward_diffuse_batch: mismatched batch".into()));
    }
    let mut x = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        check_time(ti)?;
        let m = schedule.mean_coeff_raw(ti);
        let s = schedule.sigma_raw(ti);
        for j in 0..x.ncols() {
            x[(i, j)] = m * x0[(i, j)] + s * noise[(i, j)];
        }
    }
    Ok(x)
}

/// Standard-normal noise with one independent substream per row.
pub fn row_noise(seed: u64, tags: &[u64], rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    let mut path = tags.to_vec();
    path.push(0);
    for i in 0..rows {
        *path.last_mut().unwrap() = i as u64;
        let mut r = rng::substream(seed, &path);
        for j in 0..dim {
            m[(i, j)] = rng::normal(&mut r);
        }
    }
    m
}

fn mean_coeffs(schedule: &DiffusionSchedule, t: &[f64]) -> Result<Vec<f64>> {
    t.iter()
        .map(|&ti| {
            let m = schedule.mean_coeff(ti)?;
            if m < MIN_MEAN_COEFF {
                Err(Error::Degenerate(format!(
                    "mean coefficient {m:e} at t={ti} too small to rescale"
                )))
            } else {
                Ok(m)
            }
        })
        .collect()
}

/// One-step denoising `x_hat = x + sigma^2(t) s(x, t)`.
pub fn denoise_onestep(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    sample: &NoisySample,
) -> Result<DenoisedSample> {
    let x = Matrix::from_row_slice(1, sample.x.len(), sample.x.as_slice());
    let b = denoise_batch(schedule, score, &x, &[sample.t])?;
    Ok(DenoisedSample {
        x_hat: crate::linalg::row(&b.x_hat, 0),
        x0_scale: crate::linalg::row(&b.x0_scale, 0),
        t: sample.t,
    })
}

pub fn denoise_batch(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x: &Matrix,
    t: &[f64],
) -> Result<DenoisedBatch> {
    let m = mean_coeffs(schedule, t)?;
    let s = score.score_batch(x, t)?;
    let mut x_hat = x.clone();
    let mut x0 = x.clone();
    for (i, &ti) in t.iter().enumerate() {
        let v = schedule.sigma_raw(ti).powi(2);
        for j in 0..x.ncols() {
            x_hat[(i, j)] = x[(i, j)] + v * s[(i, j)];
            x0[(i, j)] = x_hat[(i, j)] / m[i];
        }
    }
    if !crate::linalg::is_finite(&x_hat) {
        return Err(Error::NonFinite("denoised batch".into()));
    }
    Ok(DenoisedBatch { x_hat, x0_scale: x0 })
}

/// Denoising recorded on a tape; returns the data-scale estimate when
/// `x0_scale` is set, else the raw `x_hat`.
pub fn denoise_tape<'a>(
    schedule: &DiffusionSchedule,
    score: &'a dyn ScoreModel,
    tape: &mut Tape<'a>,
    x: Var,
    t: &[f64],
    x0_scale: bool,
) -> Result<Var> {
    let m = mean_coeffs(schedule, t)?;
    let s = score.score_tape(tape, x, t)?;
    let v: Vec<f64> = t.iter().map(|&ti| schedule.sigma_raw(ti).powi(2)).collect();
    let corr = tape.scale_rows(s, v);
    let x_hat = tape.add(x, corr);
    if x0_scale {
        Ok(tape.scale_rows(x_hat, m.iter().map(|mi| 1.0 / mi).collect()))
    } else {
        Ok(x_hat)
    }
}

/// Diffuse each `x0` row to its time and denoise in one step.
pub fn diffuse_and_denoise(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Matrix,
    t: &[f64],
    noise: &Matrix,
) -> Result<DenoisedBatch> {
    let x = forward_diffuse_batch(schedule, x0, t, noise)?;
    denoise_batch(schedule, score, &x, t)
}
