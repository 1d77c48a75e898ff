//! Brute-force grid integration of posterior expectations.
//!
//! Evaluates `E[h(m_t) | x]` as a weighted sum over a uniform midpoint grid
//! in x0-space, with weights `p0(x0) N(x; c x0, s^2 I)`. It shares no code
//! with the closed-form posterior and exists only to referee it.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixture;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureGrid {
    pub half_width: f64,
    pub points_per_axis: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid {
            half_width: 8.0,
            points_per_axis: 400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrand {
    /// `E[m_t | x]`, returned as a `d x 1` matrix.
    Mean,
    /// `E[m_t m_t^T | x]`.
    SecondMoment,
    /// `E[m m^T] - E[m] E[m]^T`.
    Covariance,
}

fn component_log_pdfs(gmm: &GaussianMixture) -> Vec<(f64, Vector, Matrix, f64)> {
    let d = gmm.dim() as f64;
    (0..gmm.num_components())
        .map(|k| {
            let ch = Cholesky::new(gmm.covariances()[k].clone()).expect("SPD");
            let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let norm = -0.5 * (logdet + d * (2.0 * std::f64::consts::PI).ln());
            (gmm.weights()[k].ln(), gmm.means()[k].clone(), ch.inverse(), norm)
        })
        .collect()
}

pub fn quadrature_expectation(
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    x: &Vector,
    t: f64,
    integrand: Integrand,
    grid: &QuadratureGrid,
) -> Result<Matrix> {
    let d = gmm.dim();
    if d > 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    if x.len() != d {
        return Err(Error::Shape(format!("point has {} coords, mixture {d}", x.len())));
    }
    let c = schedule.mean_coeff(t)?;
    let s = schedule.sigma(t)?;
    if s <= 0.0 {
        return Err(Error::Degenerate("quadrature needs sigma(t) > 0".into()));
    }
    let n = grid.points_per_axis;
    // clip each axis to x/c +- 12 s/c, outside which the likelihood factor
    // is below e^-72, so sharp small-noise posteriors stay resolved
    let reach = 12.0 * s / c;
    let (mut lo, mut h) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..d {
        let (mut a, mut b) = (-grid.half_width, grid.half_width);
        let (wa, wb) = (x[j] / c - reach, x[j] / c + reach);
        if wa < b && wb > a {
            a = a.max(wa);
            b = b.min(wb);
        }
        lo[j] = a;
        h[j] = (b - a) / n as f64;
    }
    let comps = component_log_pdfs(gmm);
    let total = n.pow(d as u32);

    let mut log_wts = Vec::with_capacity(total);
    let mut nodes = Vec::with_capacity(total);
    let mut z = Vector::zeros(d);
    let mut lp = Vec::with_capacity(comps.len());
    for flat in 0..total {
        let mut rem = flat;
        for j in 0..d {
            z[j] = lo[j] + ((rem % n) as f64 + 0.5) * h[j];
            rem /= n;
        }
        lp.clear();
        for (lw, mu, prec, norm) in &comps {
            let dz = &z - mu;
            lp.push(lw + norm - 0.5 * dz.dot(&(prec * &dz)));
        }
        let m = &z * c;
        let lik = -0.5 * (x - &m).norm_squared() / (s * s);
        log_wts.push(log_sum_exp(&lp) + lik);
        nodes.push(m);
    }
    let lse = log_sum_exp(&log_wts);
    let mut mean = Vector::zeros(d);
    let mut second = Matrix::zeros(d, d);
    for (lw, m) in log_wts.iter().zip(&nodes) {
        let w = (lw - lse).exp();
        mean += m * w;
        if integrand != Integrand::Mean {
            second += m * m.transpose() * w;
        }
    }
    Ok(match integrand {
        Integrand::Mean => Matrix::from_column_slice(d, 1, mean.as_slice()),
        Integrand::SecondMoment => second,
        Integrand::Covariance => second - &mean * mean.transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> GaussianMixture {
        GaussianMixture::new(
            vec![1.0],
            vec![Vector::from_vec(vec![0.5, -0.3])],
            vec![Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])],
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_matches_conjugate_closed_form() {
        let g = unit();
        let sched = DiffusionSchedule::ve_default();
        let t = sched.time_for_sigma(1.0).unwrap();
        let x = Vector::from_vec(vec![1.5, 0.4]);
        let q = quadrature_expectation(&g, &sched, &x, t, Integrand::Mean, &QuadratureGrid::default()).unwrap();
        // Sigma (Sigma + I)^-1 (x - mu) + mu
        let s = &g.covariances()[0];
        let gain = s * (s + Matrix::identity(2, 2)).try_inverse().unwrap();
        let closed = &g.means()[0] + gain * (&x - &g.means()[0]);
        for j in 0..2 {
            assert!((q[(j, 0)] - closed[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn covariance_matches_closed_form_posterior() {
        let g = GaussianMixture::canonical();
        let sched = DiffusionSchedule::ve_default();
        let t = sched.time_for_sigma(1.0).unwrap();
        let x = Vector::from_vec(vec![0.5, 0.5]);
        let q = quadrature_expectation(&g, &sched, &x, t, Integrand::Covariance, &QuadratureGrid::default()).unwrap();
        let p = g.at_time(&sched, t).unwrap().posterior(x.as_slice());
        assert!((q - p.covariance).amax() < 1e-4);
    }

    #[test]
    fn grid_refinement_converges() {
        let g = GaussianMixture::canonical();
        let sched = DiffusionSchedule::vp_default();
        let x = Vector::from_vec(vec![-0.4, 0.8]);
        let fine = quadrature_expectation(&g, &sched, &x, 0.3, Integrand::SecondMoment, &QuadratureGrid::default()).unwrap();
        let coarse = quadrature_expectation(
            &g,
            &sched,
            &x,
            0.3,
            Integrand::SecondMoment,
            &QuadratureGrid { points_per_axis: 200, ..Default::default() },
        )
        .unwrap();
        assert!((fine - coarse).amax() < 1e-4);
    }

    #[test]
    fn high_dimension_is_unsupported() {
        let g = GaussianMixture::new(vec![1.0], vec![Vector::zeros(4)], vec![Matrix::identity(4, 4)], None).unwrap();
        let r = quadrature_expectation(&g, &DiffusionSchedule::ve_default(), &Vector::zeros(4), 0.5, Integrand::Mean, &QuadratureGrid::default());
        assert!(matches!(r, Err(Error::UnsupportedDimension(4))));
    }
}
