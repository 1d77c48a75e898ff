//! Reverse-time samplers: Euler-Maruyama predictor with an optional
//! Langevin corrector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::process::NoisySample;
use super::schedule::DiffusionSchedule;
use crate::error::{check_time, Error, Result};
use crate::linalg::{is_finite, Matrix, Vector};
use crate::rng::{self, Stream};
use crate::score::ScoreModel;

/// Batched score callback: rows of `x` all at time `t`.
pub type BatchScoreFn<'a> = dyn Fn(&Matrix, f64) -> Result<Matrix> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStep {
    pub sample: NoisySample,
    /// The step would have crossed t = 0 and was shortened to land on it.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcConfig {
    pub n_steps: usize,
    pub n_corrector: usize,
    pub snr: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        PcConfig {
            n_steps: 1000,
            n_corrector: 1,
            snr: 0.16,
        }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs n_steps >= 1".into()));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr must be finite and >= 0, got {}", self.snr)));
        }
        Ok(())
    }
}

/// Euler-Maruyama step of the reverse SDE with explicit noise. A step that
/// ends at t = 0 drops the noise term.
pub fn reverse_sde_step_with_noise(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    state: &NoisySample,
    dt: f64,
    noise: &Vector,
) -> Result<ReverseStep> {
    check_time(state.t)?;
    if !(dt < 0.0) {
        return Err(Error::Domain(format!("reverse step needs dt < 0, got {dt}")));
    }
    let (dt, clamped) = if state.t + dt < 0.0 {
        (-state.t, true)
    } else {
        (dt, false)
    };
    let t_next = if clamped { 0.0 } else { state.t + dt };
    let s = score.score(&state.x, state.t)?;
    let f = schedule.drift_coeff(state.t);
    let g = schedule.diffusion(state.t);
    let mut x = &state.x + (&state.x * f - s * (g * g)) * dt;
    if t_next > 0.0 {
        x += noise * (g * (-dt).sqrt());
    }
    Ok(ReverseStep {
        sample: NoisySample {
            x,
            t: t_next,
            origin_index: state.origin_index,
        },
        clamped,
    })
}

pub fn reverse_sde_step(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    state: &NoisySample,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<ReverseStep> {
    let noise = Vector::from_vec(rng::normal_vec(rng, state.x.len()));
    reverse_sde_step_with_noise(schedule, score, state, dt, &noise)
}

fn prior_scale(schedule: &DiffusionSchedule) -> f64 {
    schedule.sigma_raw(1.0)
}

/// Runs the predictor-corrector loop; row `i` consumes only `streams[i]`.
fn run_pc<R: Rng>(
    schedule: &DiffusionSchedule,
    score: &BatchScoreFn,
    dim: usize,
    streams: &mut [R],
    cfg: &PcConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    let n = streams.len();
    let scale = prior_scale(schedule);
    let mut x = Matrix::zeros(n, dim);
    for (i, r) in streams.iter_mut().enumerate() {
        for j in 0..dim {
            x[(i, j)] = scale * rng::normal(r);
        }
    }
    let mut z = Matrix::zeros(n, dim);
    let draw = |z: &mut Matrix, streams: &mut [R]| {
        for (i, r) in streams.iter_mut().enumerate() {
            for j in 0..dim {
                z[(i, j)] = rng::normal(r);
            }
        }
    };
    for step in 0..cfg.n_steps {
        let t = 1.0 - step as f64 / cfg.n_steps as f64;
        let t_next = 1.0 - (step + 1) as f64 / cfg.n_steps as f64;
        let dt = t_next - t;

        let alpha = match schedule {
            DiffusionSchedule::Ve { .. } => 1.0,
            DiffusionSchedule::Vp { .. } => 1.0 - schedule.beta(t) * (-dt),
        };
        for _ in 0..cfg.n_corrector {
            let s = score(&x, t)?;
            draw(&mut z, streams);
            // step from batch-averaged norms; per-row norms blow up where s ~ 0
            let sn = (0..n).map(|i| s.row(i).norm()).sum::<f64>() / n as f64;
            let zn = (0..n).map(|i| z.row(i).norm()).sum::<f64>() / n as f64;
            let eps = if sn > 0.0 {
                2.0 * alpha * (cfg.snr * zn / sn).powi(2)
            } else {
                0.0
            };
            let amp = (2.0 * eps).sqrt();
            for i in 0..n {
                for j in 0..dim {
                    x[(i, j)] += eps * s[(i, j)] + amp * z[(i, j)];
                }
            }
        }

        let s = score(&x, t)?;
        let f = schedule.drift_coeff(t);
        let g = schedule.diffusion(t);
        let last = step + 1 == cfg.n_steps;
        if !last {
            draw(&mut z, streams);
        }
        let amp = g * (-dt).sqrt();
        for i in 0..n {
            for j in 0..dim {
                let xi = x[(i, j)];
                let mut v = xi + (f * xi - g * g * s[(i, j)]) * dt;
                if !last && t_next > 0.0 {
                    v += amp * z[(i, j)];
                }
                x[(i, j)] = v;
            }
        }
        if !is_finite(&x) {
            return Err(Error::NonFinite(format!("sampler state at step {step} (t={t:.4})")));
        }
    }
    Ok(x)
}

/// Single trajectory from the prior at t = 1 down to t = 0.
pub fn pc_sample(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    cfg: &PcConfig,
    rng: &mut Stream,
) -> Result<Vector> {
    let f = |x: &Matrix, t: f64| score.score_batch(x, &vec![t; x.nrows()]);
    let x = run_pc(schedule, &f, score.dim(), std::slice::from_mut(rng), cfg)?;
    Ok(crate::linalg::row(&x, 0))
}

/// `n_chains` trajectories; chain `i` draws from the substream
/// `(seed, CHAIN, i)`. Without a corrector the chains are fully
/// independent of the batch size; the corrector step size couples them
/// through batch-averaged norms.
pub fn pc_sample_chains(
    schedule: &DiffusionSchedule,
    score: &BatchScoreFn,
    dim: usize,
    n_chains: usize,
    cfg: &PcConfig,
    seed: u64,
) -> Result<Matrix> {
    let mut streams: Vec<Stream> = (0..n_chains)
        .map(|i| rng::substream(seed, &[rng::tag::CHAIN, i as u64]))
        .collect();
    run_pc(schedule, score, dim, &mut streams, cfg)
}

pub fn pc_sample_model(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    n_chains: usize,
    cfg: &PcConfig,
    seed: u64,
) -> Result<Matrix> {
    let f = |x: &Matrix, t: f64| score.score_batch(x, &vec![t; x.nrows()]);
    pc_sample_chains(schedule, &f, score.dim(), n_chains, cfg, seed)
}
