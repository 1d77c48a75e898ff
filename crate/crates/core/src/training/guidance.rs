use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{elapsed_ms, sample_indices, DivergenceGuard, LossTrace, TraceRow, TrainConfig};
use crate::classifier::{accuracy, argmax_rows, ClassifierKind, NetClassifier};
use crate::diffusion::{denoise_batch, forward_diffuse_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gmm::Dataset;
use crate::linalg::Matrix;
use crate::nnet::{Adam, Mlp, NetworkSpec, Tape};
use crate::rng::{self, tag};
use crate::score::ScoreModel;

fn train_guidance(
    kind: ClassifierKind,
    data: &Dataset,
    schedule: &DiffusionSchedule,
    score: Option<&dyn ScoreModel>,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetClassifier, LossTrace)> {
    cfg.validate()?;
    schedule.validate()?;
    let mut model = NetClassifier::new(Mlp::new(spec)?, kind, *schedule, data.coordinate_variance())?;
    let mut opt = Adam::new(cfg.adam, model.net().params().len());
    let mut guard = DivergenceGuard::default();
    let mut trace = LossTrace::default();
    let start = Instant::now();
    for step in 0..cfg.steps {
        let mut br = rng::substream(cfg.seed, &[tag::BATCH, step as u64]);
        let idx = sample_indices(&mut br, data.len(), cfg.batch_size);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut nr = rng::substream(cfg.seed, &[tag::NOISE, step as u64]);
        let t: Vec<f64> = (0..idx.len()).map(|_| rng::uniform(&mut nr, 0.0, 1.0)).collect();
        let eps = Matrix::from_fn(idx.len(), data.dim(), |_, _| rng::normal(&mut nr));
        let x = forward_diffuse_batch(schedule, &data.points.select_rows(&idx), &t, &eps)?;

        let mut tape = Tape::new();
        let denoised = match (kind, score) {
            (ClassifierKind::DenoisingAugmented, Some(s)) => {
                // frozen score: the denoised input is a constant leaf
                let d = denoise_batch(schedule, s, &x, &t)?;
                Some(tape.leaf(d.x0_scale))
            }
            (ClassifierKind::DenoisingAugmented, None) => {
                return Err(Error::Config("denoising-augmented training needs a score".into()))
            }
            _ => None,
        };
        let xv = tape.leaf(x);
        let (logits, net) = model.logits_tape(&mut tape, xv, denoised, Some(&t))?;
        let lp = tape.log_softmax(logits);
        let loss = tape.nll_mean(lp, &y);
        let value = tape.value(loss)[(0, 0)];
        guard.check(step, value)?;
        let grads = tape.backward(loss);
        let g = model.net().flat_grad(&grads, &net, &tape);
        opt.update_with_lr(model.net_mut().params_mut(), &g, cfg.lr_at(step))?;
        trace.push(TraceRow { step, total: value, orig: None, diffaug: None }, elapsed_ms(start));
    }
    Ok((model, trace))
}

/// Time-conditional classifier `p(y | x, t)` on noisy samples.
pub fn train_noisy_guidance(
    data: &Dataset,
    schedule: &DiffusionSchedule,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetClassifier, LossTrace)> {
    train_guidance(ClassifierKind::Noisy, data, schedule, None, spec, cfg)
}

/// Classifier on `(x, x_hat, t)` with `x_hat` from a frozen score model.
/// Shares batch, time and noise streams with [`train_noisy_guidance`]
/// under the same seed.
pub fn train_da_guidance(
    data: &Dataset,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetClassifier, LossTrace)> {
    train_guidance(ClassifierKind::DenoisingAugmented, data, schedule, Some(score), spec, cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    ZeroNoisy,
    ZeroDenoised,
}

/// Test points diffused to per-example times, with their denoised versions.
#[derive(Clone, Debug)]
pub struct DiffusedEval {
    pub x: Matrix,
    pub denoised: Matrix,
    pub t: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Diffuses each test point to `t ~ U(0, 1)`, or to `fixed_t` when given.
pub fn diffused_eval_inputs(
    data: &Dataset,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    fixed_t: Option<f64>,
    seed: u64,
) -> Result<DiffusedEval> {
    let mut r = rng::substream(seed, &[tag::TEST, tag::TIME]);
    let n = data.len();
    let t: Vec<f64> = (0..n)
        .map(|_| fixed_t.unwrap_or_else(|| rng::uniform(&mut r, 0.0, 1.0)))
        .collect();
    let eps = Matrix::from_fn(n, data.dim(), |_, _| rng::normal(&mut r));
    let x = forward_diffuse_batch(schedule, &data.points, &t, &eps)?;
    let denoised = denoise_batch(schedule, score, &x, &t)?.x0_scale;
    Ok(DiffusedEval { x, denoised, t, labels: data.labels.clone() })
}

impl DiffusedEval {
    pub fn predict(&self, clf: &NetClassifier, ablation: Ablation) -> Result<Vec<usize>> {
        let zeros = Matrix::zeros(self.x.nrows(), self.x.ncols());
        let x = if ablation == Ablation::ZeroNoisy { &zeros } else { &self.x };
        let d = if ablation == Ablation::ZeroDenoised { &zeros } else { &self.denoised };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let dv = match clf.kind() {
            ClassifierKind::DenoisingAugmented => Some(tape.leaf(d.clone())),
            ClassifierKind::Noisy => None,
            ClassifierKind::Plain => return Err(Error::Contract("time-conditional classifier")),
        };
        let (logits, _) = clf.logits_tape(&mut tape, xv, dv, Some(&self.t))?;
        Ok(argmax_rows(tape.value(logits)))
    }

    /// Accuracy per equal-width time bucket: `(t_lo, t_hi, accuracy, count)`.
    pub fn accuracy_by_bucket(
        &self,
        clf: &NetClassifier,
        ablation: Ablation,
        buckets: usize,
    ) -> Result<Vec<(f64, f64, f64, usize)>> {
        let pred = self.predict(clf, ablation)?;
        let mut hit = vec![0usize; buckets];
        let mut count = vec![0usize; buckets];
        for (i, &ti) in self.t.iter().enumerate() {
            let b = ((ti * buckets as f64) as usize).min(buckets - 1);
            count[b] += 1;
            hit[b] += (pred[i] == self.labels[i]) as usize;
        }
        Ok((0..buckets)
            .map(|b| {
                let acc = if count[b] == 0 { f64::NAN } else { hit[b] as f64 / count[b] as f64 };
                (b as f64 / buckets as f64, (b + 1) as f64 / buckets as f64, acc, count[b])
            })
            .collect())
    }
}

pub fn diffused_accuracy(clf: &NetClassifier, eval: &DiffusedEval, ablation: Ablation) -> Result<f64> {
    Ok(accuracy(&eval.predict(clf, ablation)?, &eval.labels))
}
