//! Jacobian of the one-step denoiser, its covariance identity, and the
//! chain-rule split of classifier input gradients.

use crate::classifier::{ClassifierKind, NetClassifier};
use crate::diffusion::{denoise_batch, denoise_tape, forward_diffuse, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gmm::{posterior_moments, GaussianMixture};
use crate::linalg::{cosine, is_finite, max_abs, sym_eigen_desc, Matrix, Vector};
use crate::nnet::Tape;
use crate::rng::{self, tag};
use crate::score::ScoreModel;

/// `1e-4 (1 + |x|_inf)`.
pub fn default_fd_step(x: &Vector) -> f64 {
    1e-4 * (1.0 + x.amax())
}

/// Central-difference Jacobian of `x -> x_hat(x, t)`.
pub fn denoiser_jacobian_fd(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x: &Vector,
    t: f64,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let d = x.len();
    let mut pts = Matrix::zeros(2 * d, d);
    for j in 0..d {
        for k in 0..d {
            pts[(2 * j, k)] = x[k];
            pts[(2 * j + 1, k)] = x[k];
        }
        pts[(2 * j, j)] += h;
        pts[(2 * j + 1, j)] -= h;
    }
    let xh = denoise_batch(schedule, score, &pts, &vec![t; 2 * d])?.x_hat;
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            jac[(i, j)] = (xh[(2 * j, i)] - xh[(2 * j + 1, i)]) / (2.0 * h);
        }
        if (0..d).any(|i| !jac[(i, j)].is_finite()) {
            return Err(Error::NonFinite(format!("jacobian column for coordinate {j}")));
        }
    }
    Ok(jac)
}

#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub point: Vec<f64>,
    pub t: f64,
    pub jacobian: Matrix,
    pub cov_scaled: Matrix,
    pub max_abs_diff: f64,
    pub asymmetry: f64,
    pub eigen_floor: f64,
    /// Eigenvalues of the symmetrised Jacobian, descending.
    pub jacobian_spectrum: Vec<f64>,
    pub cov_spectrum: Vec<f64>,
}

impl JacobianReport {
    pub fn to_json_row(&self) -> serde_json::Value {
        serde_json::json!({
            "point": self.point,
            "t": self.t,
            "max_abs_diff": self.max_abs_diff,
            "asymmetry": self.asymmetry,
            "eigen_floor": self.eigen_floor,
            "jacobian_spectrum": self.jacobian_spectrum,
            "cov_spectrum": self.cov_spectrum,
        })
    }
}

/// Finite-difference denoiser Jacobian against `Cov[m_t | x] / sigma^2`.
pub fn verify_theorem1(
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    points: &[(Vector, f64)],
) -> Result<Vec<JacobianReport>> {
    points
        .iter()
        .map(|(x, t)| {
            let j = denoiser_jacobian_fd(schedule, score, x, *t, default_fd_step(x))?;
            let s2 = schedule.sigma(*t)?.powi(2);
            let cov = posterior_moments(gmm, schedule, x, *t)?.covariance / s2;
            let (jv, _) = sym_eigen_desc(&j);
            let (cv, _) = sym_eigen_desc(&cov);
            Ok(JacobianReport {
                point: x.iter().copied().collect(),
                t: *t,
                max_abs_diff: max_abs(&(&j - &cov)),
                asymmetry: max_abs(&(&j - j.transpose())),
                eigen_floor: jv.min(),
                jacobian_spectrum: jv.iter().copied().collect(),
                cov_spectrum: cv.iter().copied().collect(),
                jacobian: j,
                cov_scaled: cov,
            })
        })
        .collect()
}

/// Query points `x ~ p_t` with `t ~ U(t_lo, t_hi)`.
pub fn random_queries(
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    n: usize,
    t_lo: f64,
    t_hi: f64,
    seed: u64,
) -> Result<Vec<(Vector, f64)>> {
    let mut r = rng::substream(seed, &[tag::TEST]);
    (0..n)
        .map(|_| {
            let t = rng::uniform(&mut r, t_lo, t_hi);
            let x0 = gmm.sample(&mut r).x0;
            Ok((forward_diffuse(schedule, &x0, t, &mut r)?.x, t))
        })
        .collect()
}

/// Gradients of `log p(y | x, x_hat(x), t)` with respect to the noisy input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDecomposition {
    pub total: Vector,
    pub partial_noisy: Vector,
    pub partial_denoised: Vector,
    /// `(d x_hat / d x)^T` applied to `partial_denoised`.
    pub transported: Vector,
}

impl GradientDecomposition {
    /// `|total - (partial_noisy + transported)|_inf`.
    pub fn residual(&self) -> f64 {
        (&self.total - &self.partial_noisy - &self.transported).amax()
    }
}

fn grad_row(g: Option<&Matrix>, d: usize) -> Vector {
    g.map_or_else(|| Vector::zeros(d), |m| crate::linalg::row(m, 0))
}

/// Splits the classifier input gradient along the two paths from `x`:
/// directly and through the denoiser. A plain classifier reads only the
/// denoised point.
pub fn input_gradient_decomposition(
    clf: &NetClassifier,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    x: &Vector,
    t: f64,
    y: usize,
) -> Result<GradientDecomposition> {
    let kind = clf.kind();
    if kind == ClassifierKind::Noisy {
        return Err(Error::Contract("denoised"));
    }
    let d = x.len();
    let xm = Matrix::from_row_slice(1, d, x.as_slice());
    let ts = [t];

    let logp = |tape: &mut Tape, xv, dv| -> Result<_> {
        let (logits, _) = match kind {
            ClassifierKind::Plain => clf.logits_tape(tape, dv, None, None)?,
            _ => clf.logits_tape(tape, xv, Some(dv), Some(&ts))?,
        };
        let lp = tape.log_softmax(logits);
        Ok(tape.pick_sum(lp, &[y]))
    };

    // total derivative through the denoiser
    let mut tape = Tape::new();
    let xv = tape.leaf(xm.clone());
    let dv = denoise_tape(schedule, score, &mut tape, xv, &ts, true)?;
    let root = logp(&mut tape, xv, dv)?;
    let total = grad_row(tape.backward(root).get(xv), d);

    // partials with the denoised point held as an independent leaf
    let den = denoise_batch(schedule, score, &xm, &ts)?.x0_scale;
    let mut tape = Tape::new();
    let xv = tape.leaf(xm.clone());
    let dv = tape.leaf(den);
    let root = logp(&mut tape, xv, dv)?;
    let g = tape.backward(root);
    let partial_noisy = if kind == ClassifierKind::Plain { Vector::zeros(d) } else { grad_row(g.get(xv), d) };
    let partial_denoised = grad_row(g.get(dv), d);

    let mut tape = Tape::new();
    let xv = tape.leaf(xm);
    let dv = denoise_tape(schedule, score, &mut tape, xv, &ts, true)?;
    let seed = Matrix::from_row_slice(1, d, partial_denoised.as_slice());
    let transported = grad_row(tape.backward_seeded(dv, seed).get(xv), d);

    for (name, v) in [("total", &total), ("noisy", &partial_noisy), ("transported", &transported)] {
        if !v.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite(format!("{name} input gradient")));
        }
    }
    Ok(GradientDecomposition { total, partial_noisy, partial_denoised, transported })
}

/// `|cos|` of the transported gradient and of the raw denoised-input
/// partial against the top eigenvector of `Cov[m_t | x]`.
pub fn eigen_alignment(
    dec: &GradientDecomposition,
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    x: &Vector,
    t: f64,
) -> Result<(f64, f64)> {
    let cov = posterior_moments(gmm, schedule, x, t)?.covariance;
    let (_, vecs) = sym_eigen_desc(&cov);
    let top = vecs.column(0).into_owned();
    Ok((cosine(&dec.transported, &top).abs(), cosine(&dec.partial_denoised, &top).abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianSvd {
    pub singular_values: Vector,
    pub u: Matrix,
    pub v_t: Matrix,
}

impl JacobianSvd {
    pub fn reconstruct(&self) -> Matrix {
        &self.u * Matrix::from_diagonal(&self.singular_values) * &self.v_t
    }

    /// Singular values above `tol * s_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.singular_values.get(0).copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > tol * top).count()
    }
}

/// SVD with singular values in non-increasing order.
pub fn svd_jacobian(j: &Matrix) -> Result<JacobianSvd> {
    if !is_finite(j) {
        return Err(Error::NonFinite("jacobian".into()));
    }
    let svd = j.clone().svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Ok(JacobianSvd {
        singular_values: Vector::from_iterator(s.len(), order.iter().map(|&k| s[k])),
        u: Matrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]),
        v_t: Matrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]),
    })
}
