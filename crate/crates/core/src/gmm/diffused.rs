//! The mixture pushed through the forward process at a fixed noise level.
//!
//! With `m_t = c x0` (c = mean coefficient) and `x | m_t ~ N(m_t, s^2 I)`,
//! component k of `p_t` is `N(c mu_k, c^2 Sigma_k + s^2 I)` and the
//! per-component posterior of `m_t` given `x` is Gaussian, which makes the
//! score, its Jacobian and the posterior moments exact.

use nalgebra::Cholesky;

use super::mixture::{BayesPrediction, GaussianMixture};
use crate::linalg::{log_sum_exp, Matrix, Vector};

#[derive(Clone, Debug)]
struct Component {
    log_w: f64,
    mean: Vector,
    prec: Matrix,
    log_norm: f64,
    prior: Matrix,
    class: usize,
}

#[derive(Clone, Debug)]
pub struct DiffusedMixture {
    dim: usize,
    mean_coeff: f64,
    sigma: f64,
    num_classes: usize,
    comps: Vec<Component>,
}

/// Moments of `p(m_t | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    pub responsibility: Vec<f64>,
    pub mean: Vector,
    pub covariance: Matrix,
}

impl DiffusedMixture {
    pub(crate) fn new(gmm: &GaussianMixture, mean_coeff: f64, sigma: f64) -> Self {
        let d = gmm.dim();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let comps = (0..gmm.num_components())
            .map(|k| {
                let prior = &gmm.covariances()[k] * (mean_coeff * mean_coeff);
                let cov = &prior + Matrix::identity(d, d) * (sigma * sigma);
                let chol = Cholesky::new(cov).expect("marginal covariance is positive definite");
                let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Component {
                    log_w: gmm.weights()[k].ln(),
                    mean: &gmm.means()[k] * mean_coeff,
                    prec: chol.inverse(),
                    log_norm: -0.5 * (logdet + d as f64 * ln2pi),
                    prior,
                    class: gmm.class_of(k),
                }
            })
            .collect();
        DiffusedMixture {
            dim: d,
            mean_coeff,
            sigma,
            num_classes: gmm.num_classes(),
            comps,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean_coeff(&self) -> f64 {
        self.mean_coeff
    }

    fn diff(&self, k: usize, x: &[f64]) -> Vector {
        Vector::from_fn(self.dim, |j, _| x[j] - self.comps[k].mean[j])
    }

    /// `log w_k + log N_k(x)` per component, with `P_k (x - mean_k)`.
    fn terms(&self, x: &[f64]) -> (Vec<f64>, Vec<Vector>) {
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut pd = Vec::with_capacity(self.comps.len());
        for (k, c) in self.comps.iter().enumerate() {
            let diff = self.diff(k, x);
            let p = &c.prec * &diff;
            logs.push(c.log_w + c.log_norm - 0.5 * diff.dot(&p));
            pd.push(p);
        }
        (logs, pd)
    }

    fn normalise(logs: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.terms(x).0)
    }

    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        Self::normalise(&self.terms(x).0)
    }

    /// `grad_x log p_t(x)`.
    pub fn score(&self, x: &[f64]) -> Vector {
        let (logs, pd) = self.terms(x);
        let r = Self::normalise(&logs);
        pd.iter()
            .zip(&r)
            .fold(Vector::zeros(self.dim), |acc, (p, rk)| acc - p * *rk)
    }

    /// Hessian of `log p_t(x)`:
    /// `sum_k r_k (g_k g_k^T - P_k) - s s^T` with `g_k = -P_k (x - mean_k)`.
    pub fn hessian(&self, x: &[f64]) -> Matrix {
        let (logs, pd) = self.terms(x);
        let r = Self::normalise(&logs);
        let mut h = Matrix::zeros(self.dim, self.dim);
        let mut s = Vector::zeros(self.dim);
        for ((c, p), rk) in self.comps.iter().zip(&pd).zip(&r) {
            h += (p * p.transpose() - &c.prec) * *rk;
            s -= p * *rk;
        }
        h - &s * s.transpose()
    }

    /// Exact posterior moments of `m_t` given `x`.
    pub fn posterior(&self, x: &[f64]) -> PosteriorMoments {
        let (logs, pd) = self.terms(x);
        let r = Self::normalise(&logs);
        let mut means = Vec::with_capacity(self.comps.len());
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for (c, (p, rk)) in self.comps.iter().zip(pd.iter().zip(&r)) {
            // mean_k + A P (x - mean_k);  A - A P A
            let mk = &c.mean + &c.prior * p;
            let ck = &c.prior - &c.prior * &c.prec * &c.prior;
            cov += (&ck + ck.transpose()) * (0.5 * rk);
            means.push(mk);
        }
        let mean = means
            .iter()
            .zip(&r)
            .fold(Vector::zeros(self.dim), |acc, (m, rk)| acc + m * *rk);
        for (m, rk) in means.iter().zip(&r) {
            let dm = m - &mean;
            cov += &dm * dm.transpose() * *rk;
        }
        PosteriorMoments {
            responsibility: r,
            mean,
            covariance: cov,
        }
    }

    /// Class posterior `p_t(y | x)`.
    pub fn class_posterior(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut post = vec![0.0; self.num_classes];
        for (c, rk) in self.comps.iter().zip(&r) {
            post[c.class] += rk;
        }
        post
    }

    pub fn class_log_posterior(&self, x: &[f64]) -> Vec<f64> {
        let (logs, _) = self.terms(x);
        let lse = log_sum_exp(&logs);
        (0..self.num_classes)
            .map(|y| {
                let l: Vec<f64> = self
                    .comps
                    .iter()
                    .zip(&logs)
                    .filter(|(c, _)| c.class == y)
                    .map(|(_, l)| *l)
                    .collect();
                log_sum_exp(&l) - lse
            })
            .collect()
    }

    pub fn bayes(&self, x: &[f64]) -> BayesPrediction {
        let posterior = self.class_posterior(x);
        let mut label = 0;
        for (y, p) in posterior.iter().enumerate() {
            if *p > posterior[label] {
                label = y;
            }
        }
        BayesPrediction { label, posterior }
    }

    /// `grad_x log p_t(x | y)`: the score of the class-conditional mixture.
    pub fn class_score(&self, x: &[f64], y: usize) -> Vector {
        let (logs, pd) = self.terms(x);
        let idx: Vec<usize> = (0..self.comps.len())
            .filter(|&k| self.comps[k].class == y)
            .collect();
        let l: Vec<f64> = idx.iter().map(|&k| logs[k]).collect();
        let r = Self::normalise(&l);
        idx.iter()
            .zip(&r)
            .fold(Vector::zeros(self.dim), |acc, (&k, rk)| acc - &pd[k] * *rk)
    }

    /// `grad_x log p_t(y | x)`.
    pub fn grad_log_class_posterior(&self, x: &[f64], y: usize) -> Vector {
        self.class_score(x, y) - self.score(x)
    }
}
