use std::path::Path;

use nalgebra::Cholesky;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::diffused::DiffusedMixture;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen_desc, Matrix, Vector};
use crate::rng;

pub const CANONICAL_FIXTURE: &str = include_str!("../../fixtures/canonical.json");
pub const FIXTURE_FORMAT: u32 = 1;

/// Exact data distribution: a finite mixture of full-covariance Gaussians,
/// optionally with a class label per component.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vector>,
    covariances: Vec<Matrix>,
    classes: Option<Vec<usize>>,
    chol: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub x0: Vector,
    pub y: usize,
    pub component: usize,
}

/// Points stacked row-wise with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub components: Vec<usize>,
}

impl Dataset {
    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        let d = examples.first().map_or(0, |e| e.x0.len());
        Dataset {
            points: Matrix::from_fn(examples.len(), d, |i, j| examples[i].x0[j]),
            labels: examples.iter().map(|e| e.y).collect(),
            components: examples.iter().map(|e| e.component).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            components: idx.iter().map(|&i| self.components[i]).collect(),
        }
    }

    /// Mean per-coordinate variance of the points.
    pub fn coordinate_variance(&self) -> f64 {
        let n = self.len() as f64;
        let d = self.dim();
        (0..d)
            .map(|j| {
                let c = self.points.column(j);
                let m = c.sum() / n;
                c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
            })
            .sum::<f64>()
            / d as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesPrediction {
    pub label: usize,
    pub posterior: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vector>,
        covariances: Vec<Matrix>,
        classes: Option<Vec<usize>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/covariances, got {}/{}/{}",
                k,
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mixture weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be >= 1".into()));
        }
        let mut chol = Vec::with_capacity(k);
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || c.shape() != (d, d) {
                return Err(Error::Config(format!("component {i} has inconsistent dimension")));
            }
            if (c - c.transpose()).amax() > 1e-12 {
                return Err(Error::Config(format!("covariance {i} is not symmetric")));
            }
            let floor = sym_eigen_desc(c).0.min();
            if floor <= 0.0 {
                return Err(Error::Config(format!(
                    "covariance {i} has min eigenvalue {floor} <= 0"
                )));
            }
            chol.push(Cholesky::new(c.clone()).expect("positive definite").l());
        }
        if let Some(cl) = &classes {
            if cl.len() != k {
                return Err(Error::Config(format!(
                    "{} class labels for {k} components",
                    cl.len()
                )));
            }
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariances,
            classes,
            chol,
        })
    }

    pub fn canonical() -> Self {
        Self::from_json(CANONICAL_FIXTURE).expect("canonical fixture is valid")
    }

    /// Equal-weight pair with means `(+-a, 0, ...)` and isotropic covariance,
    /// one class per component. Its Bayes boundary is the hyperplane `x_1 = 0`.
    pub fn symmetric_pair(dim: usize, a: f64, var: f64) -> Self {
        let mut m0 = Vector::zeros(dim);
        m0[0] = a;
        let mut m1 = Vector::zeros(dim);
        m1[0] = -a;
        let cov = Matrix::identity(dim, dim) * var;
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![m0, m1],
            vec![cov.clone(), cov],
            Some(vec![0, 1]),
        )
        .expect("valid pair")
    }

    pub fn from_fixture(f: &FixtureFile) -> Result<Self> {
        if f.format_version != FIXTURE_FORMAT {
            return Err(Error::Config(format!(
                "fixture format {} unsupported (expected {FIXTURE_FORMAT})",
                f.format_version
            )));
        }
        let means = f.means.iter().map(|m| Vector::from_vec(m.clone())).collect();
        let mut covs = Vec::new();
        for (i, c) in f.covariances.iter().enumerate() {
            let d = c.len();
            if c.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("covariance {i} is not square")));
            }
            covs.push(Matrix::from_fn(d, d, |r, s| c[r][s]));
        }
        Self::new(f.weights.clone(), means, covs, f.classes.clone())
    }

    pub fn to_fixture(&self, name: &str) -> FixtureFile {
        FixtureFile {
            format_version: FIXTURE_FORMAT,
            name: name.to_string(),
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect())
                .collect(),
            classes: self.classes.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: FixtureFile = serde_json::from_str(text).map_err(|e| Error::json("fixture", e))?;
        Self::from_fixture(&f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every component shifted by `offset`; same weights and labels.
    pub fn translated(&self, offset: &Vector) -> Self {
        let means = self.means.iter().map(|m| m + offset).collect();
        Self::new(
            self.weights.clone(),
            means,
            self.covariances.clone(),
            self.classes.clone(),
        )
        .expect("translation preserves validity")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix] {
        &self.covariances
    }

    pub fn classes(&self) -> Option<&[usize]> {
        self.classes.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        match &self.classes {
            Some(c) => c.iter().max().map_or(0, |m| m + 1),
            None => self.num_components(),
        }
    }

    pub fn class_of(&self, component: usize) -> usize {
        self.classes.as_ref().map_or(component, |c| c[component])
    }

    /// Class-conditional mixture `p0(x | y)`.
    pub fn class_conditional(&self, class: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..self.num_components())
            .filter(|&k| self.class_of(k) == class)
            .collect();
        let mass: f64 = idx.iter().map(|&k| self.weights[k]).sum();
        if idx.is_empty() || mass == 0.0 {
            return Err(Error::MissingClass(class));
        }
        let mut weights: Vec<f64> = idx.iter().map(|&k| self.weights[k] / mass).collect();
        let drift: f64 = weights.iter().sum::<f64>() - 1.0;
        weights[0] -= drift;
        Self::new(
            weights,
            idx.iter().map(|&k| self.means[k].clone()).collect(),
            idx.iter().map(|&k| self.covariances[k].clone()).collect(),
            Some(vec![class; idx.len()]),
        )
    }

    /// Mixture of `m x0 + sigma eps` for `x0 ~ p0`.
    pub fn diffused(&self, mean_coeff: f64, sigma: f64) -> DiffusedMixture {
        DiffusedMixture::new(self, mean_coeff, sigma)
    }

    pub fn at_time(
        &self,
        schedule: &crate::diffusion::DiffusionSchedule,
        t: f64,
    ) -> Result<DiffusedMixture> {
        Ok(self.diffused(schedule.mean_coeff(t)?, schedule.sigma(t)?))
    }

    /// Clean density `p0`.
    pub fn clean(&self) -> DiffusedMixture {
        self.diffused(1.0, 0.0)
    }

    pub fn log_density(&self, x: &Vector) -> f64 {
        self.clean().log_density(x.as_slice())
    }

    pub fn bayes_classify(&self, x: &Vector) -> Result<BayesPrediction> {
        if self.classes.is_none() {
            return Err(Error::Config("Bayes classification needs class labels".into()));
        }
        Ok(self.clean().bayes(x.as_slice()))
    }

    pub fn total_mean(&self) -> Vector {
        self.means
            .iter()
            .zip(&self.weights)
            .fold(Vector::zeros(self.dim()), |acc, (m, w)| acc + m * *w)
    }

    pub fn total_covariance(&self) -> Matrix {
        let mu = self.total_mean();
        let d = self.dim();
        let mut c = Matrix::zeros(d, d);
        for ((m, s), w) in self.means.iter().zip(&self.covariances).zip(&self.weights) {
            let dm = m - &mu;
            c += (s + &dm * dm.transpose()) * *w;
        }
        c
    }

    pub fn sample_component(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                return k;
            }
        }
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn sample_from_component(&self, k: usize, rng: &mut impl Rng) -> Vector {
        let z = Vector::from_vec(rng::normal_vec(rng, self.dim()));
        &self.means[k] + &self.chol[k] * z
    }

    pub fn sample(&self, rng: &mut impl Rng) -> LabeledExample {
        let k = self.sample_component(rng);
        LabeledExample {
            x0: self.sample_from_component(k, rng),
            y: self.class_of(k),
            component: k,
        }
    }
}

/// `n` i.i.d. labeled draws.
pub fn sample_dataset(gmm: &GaussianMixture, n: usize, rng: &mut impl Rng) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    Ok((0..n).map(|_| gmm.sample(rng)).collect())
}
