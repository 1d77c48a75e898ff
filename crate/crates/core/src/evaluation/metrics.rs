use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AurocResult {
    pub auroc: f64,
    /// False-positive rate at the highest threshold reaching 95% TPR.
    pub fpr_at_95_tpr: f64,
}

/// Rank AUROC with in-distribution as the positive class (higher score =
/// more in-distribution); ties get midranks.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<AurocResult> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Domain("auroc needs non-empty score lists".into()));
    }
    if in_scores.iter().chain(out_scores).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ood score".into()));
    }
    let (n1, n0) = (in_scores.len(), out_scores.len());
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    let auc = u / (n1 as f64 * n0 as f64);

    // descending unique thresholds; first one with TPR >= 0.95
    let mut thresholds: Vec<f64> = in_scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut fpr = 1.0;
    for &th in &thresholds {
        let tp = in_scores.iter().filter(|&&s| s >= th).count();
        if tp as f64 >= 0.95 * n1 as f64 {
            fpr = out_scores.iter().filter(|&&s| s >= th).count() as f64 / n0 as f64;
            break;
        }
    }
    Ok(AurocResult { auroc: auc, fpr_at_95_tpr: fpr })
}

/// Midranks (1-based), ties averaged.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j + 2) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain("spearman needs two equal-length series of >= 2 values".into()));
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

impl Prdc {
    pub fn as_array(&self) -> [f64; 4] {
        [self.precision, self.recall, self.density, self.coverage]
    }
}

fn dist(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum::<f64>().sqrt()
}

/// Distance from each row to its k-th nearest other row.
fn knn_radii(x: &Matrix, k: usize) -> Vec<f64> {
    let n = x.nrows();
    let mut buf = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend((0..n).filter(|&j| j != i).map(|j| dist(x, i, x, j)));
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// k-NN manifold precision, recall, density and coverage. Returns the
/// metrics and the number of zero-radius balls (duplicate points).
pub fn prdc_with_warnings(real: &Matrix, generated: &Matrix, k: usize) -> Result<(Prdc, usize)> {
    if k == 0 {
        return Err(Error::Domain("prdc needs k >= 1".into()));
    }
    if real.nrows() < k + 1 || generated.nrows() < k + 1 {
        return Err(Error::Domain(format!("prdc needs at least k+1 = {} points per set", k + 1)));
    }
    if real.ncols() != generated.ncols() {
        return Err(Error::Shape("prdc sets differ in dimension".into()));
    }
    let rr = knn_radii(real, k);
    let gr = knn_radii(generated, k);
    let zero = rr.iter().chain(&gr).filter(|&&r| r == 0.0).count();
    let (n, m) = (real.nrows(), generated.nrows());
    let mut prec = 0usize;
    let mut dens = 0usize;
    let mut covered = vec![false; n];
    let mut rec_hit = vec![false; n];
    for j in 0..m {
        let mut inside_any = false;
        for i in 0..n {
            let d = dist(real, i, generated, j);
            if d < rr[i] {
                inside_any = true;
                dens += 1;
                covered[i] = true;
            }
            if d < gr[j] {
                rec_hit[i] = true;
            }
        }
        prec += inside_any as usize;
    }
    let p = Prdc {
        precision: prec as f64 / m as f64,
        recall: rec_hit.iter().filter(|&&b| b).count() as f64 / n as f64,
        density: dens as f64 / (k * m) as f64,
        coverage: covered.iter().filter(|&&b| b).count() as f64 / n as f64,
    };
    Ok((p, zero))
}

pub fn prdc(real: &Matrix, generated: &Matrix, k: usize) -> Result<Prdc> {
    prdc_with_warnings(real, generated, k).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(midranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap().auroc, 1.0);
        assert_eq!(auroc(&[1.0; 5], &[1.0; 7]).unwrap().auroc, 0.5);
        assert_eq!(auroc(&[0.0], &[1.0]).unwrap().auroc, 0.0);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fpr95_on_separated_scores() {
        let ins: Vec<f64> = (0..100).map(|i| 1.0 + i as f64).collect();
        let outs: Vec<f64> = (0..100).map(|i| -(i as f64)).collect();
        let r = auroc(&ins, &outs).unwrap();
        assert_eq!(r.fpr_at_95_tpr, 0.0);
        let r = auroc(&outs, &ins).unwrap();
        assert_eq!(r.fpr_at_95_tpr, 1.0);
    }

    #[test]
    fn prdc_self_and_far() {
        let mut r = rng::stream(3);
        let a = Matrix::from_fn(200, 2, |_, _| rng::normal(&mut r));
        let p = prdc(&a, &a, 5).unwrap();
        assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
        assert!(p.density >= 1.0);
        let b = a.add_scalar(100.0);
        assert_eq!(prdc(&a, &b, 5).unwrap().as_array(), [0.0; 4]);
    }

    #[test]
    fn duplicates_are_flagged() {
        let a = Matrix::from_element(10, 2, 1.0);
        let (_, zero) = prdc_with_warnings(&a, &a, 3).unwrap();
        assert_eq!(zero, 20);
        assert!(prdc(&a, &a, 10).is_err());
    }
}
