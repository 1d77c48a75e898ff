//! Exact Gaussian-mixture ground truth.

pub mod diffused;
pub mod mixture;
pub mod quadrature;

pub use diffused::{DiffusedMixture, PosteriorMoments};
pub use mixture::{
    sample_dataset, BayesPrediction, Dataset, FixtureFile, GaussianMixture, LabeledExample,
    CANONICAL_FIXTURE,
};
pub use quadrature::{quadrature_expectation, Integrand, QuadratureGrid};

use crate::diffusion::DiffusionSchedule;
use crate::error::Result;
use crate::linalg::Vector;

/// `grad_x log p_t(x)` of the diffused mixture.
pub fn marginal_score(
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    x: &Vector,
    t: f64,
) -> Result<Vector> {
    Ok(gmm.at_time(schedule, t)?.score(x.as_slice()))
}

pub fn posterior_moments(
    gmm: &GaussianMixture,
    schedule: &DiffusionSchedule,
    x: &Vector,
    t: f64,
) -> Result<PosteriorMoments> {
    Ok(gmm.at_time(schedule, t)?.posterior(x.as_slice()))
}
