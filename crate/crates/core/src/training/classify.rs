use std::time::Instant;

use super::diffaug::diffaug_rows;
use super::{elapsed_ms, sample_indices, DiffAugConfig, DivergenceGuard, LossTrace, TraceRow, TrainConfig};
use crate::classifier::{ClassifierKind, NetClassifier};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::gmm::Dataset;
use crate::linalg::Matrix;
use crate::nnet::{Adam, Mlp, NetworkSpec, Tape};
use crate::rng::{self, tag};
use crate::score::ScoreModel;

/// Trains a plain classifier on clean data or, given `diffaug`, on
/// `w L_orig + (1 - w) L_aug` with fresh augmentations every step.
pub fn train_classifier(
    data: &Dataset,
    schedule: &DiffusionSchedule,
    score: Option<&dyn ScoreModel>,
    diffaug: Option<&DiffAugConfig>,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetClassifier, LossTrace)> {
    cfg.validate()?;
    if let Some(da) = diffaug {
        da.validate()?;
        if score.is_none() {
            return Err(Error::Config("DiffAug training needs a score model".into()));
        }
    }
    let mut model = NetClassifier::new(Mlp::new(spec)?, ClassifierKind::Plain, *schedule, data.coordinate_variance())?;
    let mut opt = Adam::new(cfg.adam, model.net().params().len());
    let mut guard = DivergenceGuard::default();
    let mut trace = LossTrace::default();
    let start = Instant::now();
    for step in 0..cfg.steps {
        let mut br = rng::substream(cfg.seed, &[tag::BATCH, step as u64]);
        let idx = sample_indices(&mut br, data.len(), cfg.batch_size);
        let x0 = data.points.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let active = diffaug.filter(|d| d.combine_weight < 1.0);
        let mut tape = Tape::new();
        let (root, net, row) = match active {
            None => {
                let xv = tape.leaf(x0);
                let (logits, net) = model.logits_tape(&mut tape, xv, None, None)?;
                let lp = tape.log_softmax(logits);
                let orig = tape.nll_mean(lp, &y);
                let l = tape.value(orig)[(0, 0)];
                (orig, net, TraceRow { step, total: l, orig: Some(l), diffaug: None })
            }
            Some(da) => {
                let mut ar = rng::substream(cfg.seed, &[tag::AUGMENT, step as u64]);
                let k = da.samples_per_example;
                let n = x0.nrows();
                let rep: Vec<usize> = (0..n * k).map(|i| i / k).collect();
                let (aug, _) = diffaug_rows(schedule, score.unwrap(), &x0.select_rows(&rep), da, &mut ar)?;
                // clean rows then augmented rows through one forward pass
                let mut all = Matrix::zeros(n + n * k, x0.ncols());
                all.rows_mut(0, n).copy_from(&x0);
                all.rows_mut(n, n * k).copy_from(&aug);
                let mut labels = y.clone();
                labels.extend(rep.iter().map(|&i| y[i]));
                let w = da.combine_weight;
                let coef: Vec<f64> = (0..labels.len())
                    .map(|i| if i < n { -w / n as f64 } else { -(1.0 - w) / (n * k) as f64 })
                    .collect();
                let xv = tape.leaf(all);
                let (logits, net) = model.logits_tape(&mut tape, xv, None, None)?;
                let lp = tape.log_softmax(logits);
                let lpv = tape.value(lp);
                let lo = -(0..n).map(|i| lpv[(i, labels[i])]).sum::<f64>() / n as f64;
                let la = -(n..labels.len()).map(|i| lpv[(i, labels[i])]).sum::<f64>() / (n * k) as f64;
                let weighted = tape.scale_rows(lp, coef);
                let total = tape.pick_sum(weighted, &labels);
                let tv = tape.value(total)[(0, 0)];
                (total, net, TraceRow { step, total: tv, orig: Some(lo), diffaug: Some(la) })
            }
        };
        guard.check(step, row.total)?;
        let grads = tape.backward(root);
        let g = model.net().flat_grad(&grads, &net, &tape);
        opt.update_with_lr(model.net_mut().params_mut(), &g, cfg.lr_at(step))?;
        trace.push(row, elapsed_ms(start));
    }
    Ok((model, trace))
}
