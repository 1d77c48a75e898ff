use std::time::Instant;

use super::{elapsed_ms, sample_indices, DivergenceGuard, LossTrace, TraceRow, TrainConfig};
use crate::diffusion::{forward_diffuse_batch, DiffusionSchedule};
use crate::error::Result;
use crate::gmm::{Dataset, GaussianMixture};
use crate::linalg::Matrix;
use crate::nnet::{Adam, Mlp, NetworkSpec, Tape};
use crate::rng::{self, tag};
use crate::score::{NetScore, ScoreModel};

fn normal_matrix(r: &mut rng::Stream, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng::normal(r))
}

/// `E || sigma(t) s(x, t) + eps ||^2` on a fixed batch.
pub fn dsm_loss(
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    x0: &Matrix,
    t: &[f64],
    eps: &Matrix,
) -> Result<f64> {
    let x = forward_diffuse_batch(schedule, x0, t, eps)?;
    let s = model.score_batch(&x, t)?;
    let total: f64 = (0..x.nrows())
        .map(|i| (s.row(i) * schedule.sigma_raw(t[i]) + eps.row(i)).norm_squared())
        .sum();
    Ok(total / x.nrows() as f64)
}

/// Denoising score matching with `t ~ U(0, 1)` and weighting `sigma^2(t)`.
pub fn train_score(
    data: &Dataset,
    schedule: &DiffusionSchedule,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetScore, LossTrace)> {
    cfg.validate()?;
    schedule.validate()?;
    let mut model = NetScore::new(Mlp::new(spec)?, *schedule, data.coordinate_variance())?;
    let mut opt = Adam::new(cfg.adam, model.net().params().len());
    let mut guard = DivergenceGuard::default();
    let mut trace = LossTrace::default();
    let start = Instant::now();
    let d = data.dim();
    for step in 0..cfg.steps {
        let mut r = rng::substream(cfg.seed, &[tag::BATCH, step as u64]);
        let idx = sample_indices(&mut r, data.len(), cfg.batch_size);
        let x0 = data.points.select_rows(&idx);
        let t: Vec<f64> = (0..cfg.batch_size).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let eps = normal_matrix(&mut r, cfg.batch_size, d);
        let x = forward_diffuse_batch(schedule, &x0, &t, &eps)?;

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let (out, net) = model.output_tape(&mut tape, xv, &t)?;
        let loss = tape.sq_error_mean(out, -&eps);
        let value = tape.value(loss)[(0, 0)];
        guard.check(step, value)?;
        let grads = tape.backward(loss);
        let g = model.net().flat_grad(&grads, &net, &tape);
        opt.update_with_lr(model.net_mut().params_mut(), &g, cfg.lr_at(step))?;
        trace.push(TraceRow { step, total: value, orig: None, diffaug: None }, elapsed_ms(start));
    }
    Ok((model, trace))
}

/// Aggregate relative error of `model` against the exact mixture score in
/// noise-prediction units: `sqrt(sum sigma^2 |s - s*|^2 / sum sigma^2 |s*|^2)`
/// over `n` points with `x ~ p_t` and `t` uniform on the times whose
/// `sigma(t)` lies in `[sigma_lo, sigma_hi]`.
pub fn score_relative_error(
    model: &dyn ScoreModel,
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    sigma_lo: f64,
    sigma_hi: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let t_lo = schedule.time_for_sigma(sigma_lo)?;
    let t_hi = schedule.time_for_sigma(sigma_hi.min(schedule.sigma(1.0)?))?;
    let mut r = rng::substream(seed, &[tag::TEST]);
    let x0 = crate::gmm::sample_dataset(gmm, n, &mut r)?;
    let x0 = Dataset::from_examples(&x0).points;
    let t: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, t_lo, t_hi)).collect();
    let eps = normal_matrix(&mut r, n, gmm.dim());
    let x = forward_diffuse_batch(schedule, &x0, &t, &eps)?;
    let exact = crate::score::AnalyticScore::new(gmm.clone(), *schedule).score_batch(&x, &t)?;
    let got = model.score_batch(&x, &t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let s2 = schedule.sigma(t[i])?.powi(2);
        num += s2 * (got.row(i) - exact.row(i)).norm_squared();
        den += s2 * exact.row(i).norm_squared();
    }
    Ok((num / den).sqrt())
}
