use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;

use crate::classifier::{argmax_rows, PointClassifier};
use crate::diffusion::{denoise_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{self, tag};
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyParams {
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    /// Points denoised per batch.
    pub chunk: usize,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams { n0: 100, n: 10_000, alpha: 1e-3, chunk: 2000 }
    }
}

impl CertifyParams {
    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.n == 0 || self.chunk == 0 {
            return Err(Error::Config("n0, n and chunk must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CertificationResult {
    /// `None` is an abstention.
    pub prediction: Option<usize>,
    pub radius: f64,
    pub p_lower: f64,
    pub count: usize,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub sigma_t: f64,
}

/// One-sided `(1 - alpha)` Clopper-Pearson lower bound on a binomial
/// proportion after `k` successes in `n` trials.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    // quantile of Beta(k, n - k + 1) by bisection on the CDF
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `sigma Phi^-1(p_lower)` when `p_lower > 1/2`, else abstain.
pub fn certified_radius(sigma: f64, p_lower: f64) -> Option<f64> {
    if p_lower > 0.5 {
        let z = Normal::standard().inverse_cdf(p_lower.min(1.0 - f64::EPSILON));
        Some(sigma * z)
    } else {
        None
    }
}

/// Diffusion time whose noise level is `sigma_t` on the data scale.
pub fn smoothing_time(schedule: &DiffusionSchedule, sigma_t: f64) -> Result<f64> {
    if schedule.is_ve() {
        schedule.time_for_sigma(sigma_t)
    } else {
        schedule.time_for_scaled_sigma(sigma_t)
    }
}

/// Class counts of the denoised base classifier on `count` Gaussian copies.
fn class_counts(
    clf: &dyn PointClassifier,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Vector,
    sigma_t: f64,
    t: f64,
    count: usize,
    chunk: usize,
    r: &mut rng::Stream,
) -> Result<Vec<usize>> {
    let d = x0.len();
    let m = schedule.mean_coeff(t)?;
    let mut counts = vec![0usize; clf.num_classes()];
    let mut done = 0;
    while done < count {
        let b = chunk.min(count - done);
        // x = m (x0 + sigma_t eps) lives at diffusion time t
        let x = Matrix::from_fn(b, d, |_, j| m * (x0[j] + sigma_t * rng::normal(r)));
        let den = denoise_batch(schedule, score, &x, &vec![t; b])?;
        for y in argmax_rows(&clf.probs(&den.x0_scale)?) {
            counts[y] += 1;
        }
        done += b;
    }
    Ok(counts)
}

/// Two-stage denoised-smoothing certificate at `x0`.
pub fn certify_dds(
    clf: &dyn PointClassifier,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x0: &Vector,
    sigma_t: f64,
    params: &CertifyParams,
    seed: u64,
) -> Result<CertificationResult> {
    params.validate()?;
    let t = smoothing_time(schedule, sigma_t)?;
    let mut sel = rng::substream(seed, &[tag::SELECT]);
    let c0 = class_counts(clf, schedule, score, x0, sigma_t, t, params.n0, params.chunk, &mut sel)?;
    let mut top = 0;
    for (c, &k) in c0.iter().enumerate() {
        if k > c0[top] {
            top = c;
        }
    }
    let mut est = rng::substream(seed, &[tag::ESTIMATE]);
    let c = class_counts(clf, schedule, score, x0, sigma_t, t, params.n, params.chunk, &mut est)?;
    let p_lower = clopper_pearson_lower(c[top], params.n, params.alpha);
    let radius = certified_radius(sigma_t, p_lower);
    Ok(CertificationResult {
        prediction: radius.map(|_| top),
        radius: radius.unwrap_or(0.0),
        p_lower,
        count: c[top],
        n0: params.n0,
        n: params.n,
        alpha: params.alpha,
        sigma_t,
    })
}

pub const CERTIFY_CSV_HEADER: &str = "example,sigma,label,prediction,radius,p_lower";

/// Rows of `(example id, true label, result)`.
pub fn certification_csv(rows: &[(usize, usize, CertificationResult)]) -> String {
    let mut s = format!("{CERTIFY_CSV_HEADER}\n");
    for (id, y, r) in rows {
        let pred = r.prediction.map_or("abstain".to_string(), |p| p.to_string());
        let _ = writeln!(s, "{id},{},{y},{pred},{:.6},{:.6}", r.sigma_t, r.radius, r.p_lower);
    }
    s
}

/// Certified accuracy at each radius: the fraction of examples predicted
/// correctly with radius at least `r`.
pub fn certified_accuracy_curve(rows: &[(usize, usize, CertificationResult)], radii: &[f64]) -> Vec<(f64, f64)> {
    let n = rows.len().max(1) as f64;
    radii
        .iter()
        .map(|&r| {
            let ok = rows
                .iter()
                .filter(|(_, y, c)| c.prediction == Some(*y) && c.radius >= r)
                .count();
            (r, ok as f64 / n)
        })
        .collect()
}
