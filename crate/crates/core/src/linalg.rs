//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::panel::Matrix;

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted in
/// descending order. Ties keep the solver's column order.
pub(crate) fn sym_eigen_desc(m: &Matrix) -> (Vec<f64>, Matrix) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Makes each column's largest-magnitude entry positive. Ties resolve to the
/// first such entry.
pub(crate) fn fix_column_signs(m: &mut Matrix) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        for (k, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = k;
            }
        }
        if col.len() > 0 && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Least squares `min |a x - b|`. Uses the Cholesky factor of the normal
/// equations, falling back to an SVD pseudo-inverse when `a'a` is singular.
/// The flag reports whether the fallback was taken.
pub(crate) fn least_squares(a: &Matrix, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    if let Some(ch) = ata.clone().cholesky() {
        let x = ch.solve(&atb);
        if x.iter().all(|v| v.is_finite()) && well_conditioned(&ata) {
            return (x, false);
        }
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let x = svd
        .solve(b, tol)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()));
    (x, true)
}

fn well_conditioned(ata: &Matrix) -> bool {
    let sv = ata.singular_values();
    let max = sv.max();
    let min = sv.min();
    max == 0.0 || min > max * 1e-13
}

/// Inverse of a small symmetric positive semi-definite matrix; pseudo-inverse
/// when singular.
pub(crate) fn sym_inverse(m: &Matrix) -> Matrix {
    if let Some(ch) = m.clone().cholesky() {
        return ch.inverse();
    }
    m.clone()
        .pseudo_inverse(f64::EPSILON * m.nrows() as f64 * m.amax().max(1.0))
        .unwrap_or_else(|_| Matrix::zeros(m.nrows(), m.ncols()))
}

/// Subtracts each column's mean; returns the centred copy and the means.
pub(crate) fn demean_columns(m: &Matrix) -> (Matrix, Vec<f64>) {
    let t = m.nrows() as f64;
    let means: Vec<f64> = m.column_iter().map(|c| c.sum() / t).collect();
    let centred = Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] - means[c]);
    (centred, means)
}

/// Rows `rows` of `m`, in the given order.
pub(crate) fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Columns `cols` of `m`, in the given order.
pub(crate) fn select_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}
