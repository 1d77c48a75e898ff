//! Classifier-guided reverse diffusion and class-conditional sample
//! quality.

use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierKind, NetClassifier};
use crate::diffusion::{denoise_tape, pc_sample_chains, DiffusionSchedule, PcConfig};
use crate::digest::f64_digest;
use crate::error::{Error, Result};
use crate::evaluation::{prdc, Prdc};
use crate::gmm::{Dataset, GaussianMixture};
use crate::linalg::Matrix;
use crate::nnet::Tape;
use crate::score::ScoreModel;
use crate::training::{Ablation, DiffusedEval};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePlacement {
    /// `s + lambda grad log p(y | .)`
    #[default]
    OnClassifierGradient,
    /// `grad log p(y | .) + lambda s`
    OnUnconditionalScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceKind {
    Noisy,
    DenoisingAugmented,
    /// Exact time-conditional posterior of the mixture.
    Bayes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_s: f64,
    #[serde(default)]
    pub scale_placement: ScalePlacement,
    pub classifier_kind: GuidanceKind,
    pub target_class: usize,
}

impl GuidanceConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return Err(Error::Config(format!("lambda_s must be finite and >= 0, got {}", self.lambda_s)));
        }
        if self.target_class >= classes {
            return Err(Error::Config(format!("target class {} of {classes}", self.target_class)));
        }
        Ok(())
    }
}

/// Source of `grad_x log p(y | x, t)`.
pub trait GuidanceClassifier: Send + Sync {
    fn kind(&self) -> GuidanceKind;
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Row `i` gets the gradient for label `y[i]` at time `t`.
    fn grad_log_prob(&self, x: &Matrix, t: f64, y: &[usize]) -> Result<Matrix>;
}

#[derive(Clone, Debug)]
pub struct BayesGuidance {
    pub gmm: GaussianMixture,
    pub schedule: DiffusionSchedule,
}

impl GuidanceClassifier for BayesGuidance {
    fn kind(&self) -> GuidanceKind {
        GuidanceKind::Bayes
    }

    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn num_classes(&self) -> usize {
        self.gmm.num_classes()
    }

    fn grad_log_prob(&self, x: &Matrix, t: f64, y: &[usize]) -> Result<Matrix> {
        let dm = self.gmm.at_time(&self.schedule, t)?;
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        let mut buf = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(i, j)];
            }
            let g = dm.grad_log_class_posterior(&buf, y[i]);
            for j in 0..g.len() {
                out[(i, j)] = g[j];
            }
        }
        Ok(out)
    }
}

/// A trained time-conditional classifier. The denoising-augmented kind
/// differentiates through the one-step denoiser of `score`.
pub struct NetGuidance<'a> {
    pub classifier: &'a NetClassifier,
    pub score: Option<&'a dyn ScoreModel>,
}

impl<'a> NetGuidance<'a> {
    pub fn new(classifier: &'a NetClassifier, score: Option<&'a dyn ScoreModel>) -> Result<Self> {
        match classifier.kind() {
            ClassifierKind::Noisy => Ok(NetGuidance { classifier, score: None }),
            ClassifierKind::DenoisingAugmented if score.is_some() => Ok(NetGuidance { classifier, score }),
            ClassifierKind::DenoisingAugmented => Err(Error::Config("DA guidance needs the score model".into())),
            ClassifierKind::Plain => Err(Error::Contract("time")),
        }
    }
}

impl GuidanceClassifier for NetGuidance<'_> {
    fn kind(&self) -> GuidanceKind {
        match self.classifier.kind() {
            ClassifierKind::DenoisingAugmented => GuidanceKind::DenoisingAugmented,
            _ => GuidanceKind::Noisy,
        }
    }

    fn dim(&self) -> usize {
        self.classifier.dim()
    }

    fn num_classes(&self) -> usize {
        self.classifier.classes()
    }

    fn grad_log_prob(&self, x: &Matrix, t: f64, y: &[usize]) -> Result<Matrix> {
        let ts = vec![t; x.nrows()];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let dv = match self.score {
            Some(s) => Some(denoise_tape(self.classifier.schedule(), s, &mut tape, xv, &ts, true)?),
            None => None,
        };
        let (logits, _) = self.classifier.logits_tape(&mut tape, xv, dv, Some(&ts))?;
        let lp = tape.log_softmax(logits);
        let root = tape.pick_sum(lp, y);
        let g = tape.backward(root);
        Ok(g.get_or_zeros(xv, x))
    }
}

fn combine(s: &Matrix, g: &Matrix, cfg: &GuidanceConfig) -> Matrix {
    match cfg.scale_placement {
        ScalePlacement::OnClassifierGradient => s + g * cfg.lambda_s,
        ScalePlacement::OnUnconditionalScore => g + s * cfg.lambda_s,
    }
}

/// Class-conditional score assembled from an unconditional score and a
/// guidance classifier, all rows at time `t`.
pub fn conditional_score(
    score: &dyn ScoreModel,
    clf: &dyn GuidanceClassifier,
    cfg: &GuidanceConfig,
    x: &Matrix,
    t: f64,
) -> Result<Matrix> {
    if score.dim() != clf.dim() || x.ncols() != score.dim() {
        return Err(Error::Shape(format!(
            "score dim {}, classifier dim {}, points dim {}",
            score.dim(),
            clf.dim(),
            x.ncols()
        )));
    }
    cfg.validate(clf.num_classes())?;
    let s = score.score_batch(x, &vec![t; x.nrows()])?;
    let g = clf.grad_log_prob(x, t, &vec![cfg.target_class; x.nrows()])?;
    Ok(combine(&s, &g, cfg))
}

#[derive(Clone, Debug)]
pub struct GuidedSamples {
    pub samples: Matrix,
    pub config: GuidanceConfig,
    /// Mean guidance-gradient norm per score evaluation, in call order.
    pub grad_norms: Vec<f64>,
    pub digest: String,
}

/// PC sampling with the conditional score substituted for the score.
pub fn guided_sample(
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    clf: &dyn GuidanceClassifier,
    cfg: &GuidanceConfig,
    pc: &PcConfig,
    n_chains: usize,
    seed: u64,
) -> Result<GuidedSamples> {
    cfg.validate(clf.num_classes())?;
    let norms = RefCell::new(Vec::new());
    let f = |x: &Matrix, t: f64| -> Result<Matrix> {
        let s = score.score_batch(x, &vec![t; x.nrows()])?;
        let g = clf.grad_log_prob(x, t, &vec![cfg.target_class; x.nrows()])?;
        let n = x.nrows().max(1) as f64;
        let mean = (0..g.nrows()).map(|i| g.row(i).norm()).sum::<f64>() / n;
        if !mean.is_finite() {
            let k = norms.borrow().len();
            return Err(Error::NonFinite(format!("guidance gradient at evaluation {k} (t={t:.4})")));
        }
        norms.borrow_mut().push(mean);
        Ok(combine(&s, &g, cfg))
    };
    let samples = pc_sample_chains(schedule, &f, score.dim(), n_chains, pc, seed)?;
    let grad_norms = norms.into_inner();
    let digest = f64_digest(samples.iter().copied().chain(grad_norms.iter().copied()));
    Ok(GuidedSamples { samples, config: *cfg, grad_norms, digest })
}

/// Fraction of samples the clean-data Bayes classifier assigns to `class`.
pub fn purity(gmm: &GaussianMixture, samples: &Matrix, class: usize) -> Result<f64> {
    let dm = gmm.clean();
    let mut buf = vec![0.0; samples.ncols()];
    let mut hit = 0;
    for i in 0..samples.nrows() {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = samples[(i, j)];
        }
        hit += (dm.bayes(&buf).label == class) as usize;
    }
    Ok(hit as f64 / samples.nrows().max(1) as f64)
}

/// Accuracy per time bucket with one input block of a DA classifier
/// replaced by zeros.
pub fn zero_input_ablation(
    da: &NetClassifier,
    eval: &DiffusedEval,
    which: Ablation,
    buckets: usize,
) -> Result<Vec<(f64, f64, f64, usize)>> {
    if da.kind() != ClassifierKind::DenoisingAugmented {
        return Err(Error::Contract("denoised"));
    }
    eval.accuracy_by_bucket(da, which, buckets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClasswisePrdc {
    pub per_class: Vec<(usize, Prdc)>,
    pub average: Prdc,
}

/// PRDC within every class, plus the unweighted mean over classes.
pub fn prdc_classwise(real: &Dataset, generated: &Dataset, k: usize) -> Result<ClasswisePrdc> {
    let rc: BTreeSet<usize> = real.labels.iter().copied().collect();
    let gc: BTreeSet<usize> = generated.labels.iter().copied().collect();
    if let Some(&c) = rc.symmetric_difference(&gc).next() {
        return Err(Error::MissingClass(c));
    }
    let pick = |d: &Dataset, c: usize| -> Matrix {
        let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        d.points.select_rows(&idx)
    };
    let per_class = rc
        .iter()
        .map(|&c| Ok((c, prdc(&pick(real, c), &pick(generated, c), k)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_class.len() as f64;
    let mean = |f: fn(&Prdc) -> f64| per_class.iter().map(|(_, p)| f(p)).sum::<f64>() / n;
    let average = Prdc {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        density: mean(|p| p.density),
        coverage: mean(|p| p.coverage),
    };
    Ok(ClasswisePrdc { per_class, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::sample_dataset;
    use crate::rng;
    use crate::score::AnalyticScore;

    fn bayes_cfg(y: usize, lambda: f64) -> GuidanceConfig {
        GuidanceConfig {
            lambda_s: lambda,
            scale_placement: ScalePlacement::OnClassifierGradient,
            classifier_kind: GuidanceKind::Bayes,
            target_class: y,
        }
    }

    #[test]
    fn zero_scale_is_unconditional() {
        let g = GaussianMixture::canonical();
        let s = DiffusionSchedule::ve_default();
        let sc = AnalyticScore::new(g.clone(), s);
        let clf = BayesGuidance { gmm: g, schedule: s };
        let x = Matrix::from_row_slice(2, 2, &[0.1, 0.5, -1.0, 3.0]);
        let c = conditional_score(&sc, &clf, &bayes_cfg(2, 0.0), &x, 0.3).unwrap();
        assert_eq!(c, sc.score_batch(&x, &[0.3, 0.3]).unwrap());
    }

    #[test]
    fn bayes_guidance_is_class_score() {
        let g = GaussianMixture::canonical();
        let s = DiffusionSchedule::vp_default();
        let sc = AnalyticScore::new(g.clone(), s);
        let clf = BayesGuidance { gmm: g.clone(), schedule: s };
        let x = Matrix::from_row_slice(1, 2, &[0.4, 0.9]);
        for y in 0..3 {
            let c = conditional_score(&sc, &clf, &bayes_cfg(y, 1.0), &x, 0.5).unwrap();
            let want = g.at_time(&s, 0.5).unwrap().class_score(&[0.4, 0.9], y);
            assert!((crate::linalg::row(&c, 0) - want).amax() < 1e-10);
        }
    }

    #[test]
    fn axis_pull_points_to_target() {
        let g = GaussianMixture::symmetric_pair(2, 2.0, 0.25);
        let s = DiffusionSchedule::ve_default();
        let sc = AnalyticScore::new(g.clone(), s);
        let clf = BayesGuidance { gmm: g.clone(), schedule: s };
        let x = Matrix::from_row_slice(1, 2, &[0.0, 0.7]);
        let c = conditional_score(&sc, &clf, &bayes_cfg(0, 1.0), &x, 0.4).unwrap();
        let m0 = &g.means()[0];
        assert!(c[(0, 0)] * m0[0] > 0.0);
    }

    #[test]
    fn purity_of_guided_pair() {
        let g = GaussianMixture::symmetric_pair(2, 2.0, 0.25);
        let s = DiffusionSchedule::ve_default();
        let sc = AnalyticScore::new(g.clone(), s);
        let clf = BayesGuidance { gmm: g.clone(), schedule: s };
        let pc = PcConfig { n_steps: 200, ..Default::default() };
        let out = guided_sample(&s, &sc, &clf, &bayes_cfg(1, 1.0), &pc, 200, 3).unwrap();
        assert!(purity(&g, &out.samples, 1).unwrap() >= 0.95);
        assert_eq!(out.grad_norms.len(), 400);
        assert!(out.grad_norms.iter().all(|v| v.is_finite()));
        let again = guided_sample(&s, &sc, &clf, &bayes_cfg(1, 1.0), &pc, 200, 3).unwrap();
        assert_eq!(out.digest, again.digest);
    }

    #[test]
    fn classwise_prdc_averages_and_missing_class() {
        let g = GaussianMixture::canonical();
        let d = Dataset::from_examples(&sample_dataset(&g, 600, &mut rng::stream(1)).unwrap());
        let r = prdc_classwise(&d, &d, 5).unwrap();
        for (_, p) in &r.per_class {
            assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
        }
        let mean_d = r.per_class.iter().map(|(_, p)| p.density).sum::<f64>() / 3.0;
        assert!((r.average.density - mean_d).abs() <= 1e-12);
        let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] != 2).collect();
        let e = prdc_classwise(&d, &d.subset(&idx), 5);
        assert!(matches!(e, Err(Error::MissingClass(2))));
    }
}
