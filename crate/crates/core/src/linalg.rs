//! Small dense linear algebra shared across modules.
//!
//! Points and batches are `nalgebra` dynamic types; a batch is a matrix
//! with one point per row.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub fn row(m: &Matrix, i: usize) -> Vector {
    Vector::from_iterator(m.ncols(), (0..m.ncols()).map(|j| m[(i, j)]))
}

pub fn set_row(m: &mut Matrix, i: usize, v: &[f64]) {
    for (j, &x) in v.iter().enumerate() {
        m[(i, j)] = x;
    }
}

/// Stacks points into a batch matrix, one per row.
pub fn stack_rows(points: &[Vector]) -> Matrix {
    let d = points.first().map_or(0, |p| p.len());
    Matrix::from_fn(points.len(), d, |i, j| points[i][j])
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Eigen-decomposition of the symmetric part, eigenvalues sorted descending.
pub fn sym_eigen_desc(m: &Matrix) -> (Vector, Matrix) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

pub fn cosine(a: &Vector, b: &Vector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
