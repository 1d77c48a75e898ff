use crate::classifier::{entropy_rows, PointClassifier};
use crate::diffusion::{denoise_batch, forward_diffuse_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gmm::Dataset;
use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::score::ScoreModel;

/// Mean prediction entropy over DiffAug draws of the test set at each `t`.
/// One noise matrix is shared across the grid.
pub fn entropy_curve(
    clf: &dyn PointClassifier,
    data: &Dataset,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel,
    t_grid: &[f64],
    use_x0_scale: bool,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if t_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("t_grid must be sorted".into()));
    }
    let n = data.len();
    let mut r = rng::substream(seed, &[tag::TEST, tag::NOISE]);
    let eps = Matrix::from_fn(n, data.dim(), |_, _| rng::normal(&mut r));
    t_grid
        .iter()
        .map(|&t| {
            let ts = vec![t; n];
            let x = forward_diffuse_batch(schedule, &data.points, &ts, &eps)?;
            let d = denoise_batch(schedule, score, &x, &ts)?;
            let h = entropy_rows(&clf.probs(d.select(use_x0_scale))?);
            Ok((t, h.iter().sum::<f64>() / n as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierKind;
    use crate::classifier::NetClassifier;
    use crate::gmm::{sample_dataset, GaussianMixture};
    use crate::nnet::Mlp;
    use crate::score::AnalyticScore;

    #[test]
    fn uniform_classifier_has_log_c() {
        let g = GaussianMixture::canonical();
        let s = DiffusionSchedule::ve_default();
        let d = Dataset::from_examples(&sample_dataset(&g, 200, &mut rng::stream(1)).unwrap());
        let clf = NetClassifier::new(
            Mlp::new(ClassifierKind::Plain.spec(2, 3, &[8], 0, 0)).unwrap(),
            ClassifierKind::Plain,
            s,
            1.0,
        )
        .unwrap();
        let sc = AnalyticScore::new(g, s);
        for (_, h) in entropy_curve(&clf, &d, &s, &sc, &[0.0, 0.3, 1.0], true, 2).unwrap() {
            assert!((h - 3f64.ln()).abs() < 1e-12);
        }
        assert!(entropy_curve(&clf, &d, &s, &sc, &[0.5, 0.1], true, 2).is_err());
    }
}
