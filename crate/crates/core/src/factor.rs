//! Latent factor extraction by asymptotic principal components, factor-count
//! selection, and the intercept-augmented per-unit loading regressions.
//!
//! Factors and loadings are only identified up to an invertible rotation; the
//! common component `[1 F] Lambda'` is what downstream code relies on.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_column_signs, least_squares, sym_eigen_desc};
use crate::panel::Matrix;

/// Output of [`pca_factors`].
#[derive(Debug, Clone)]
pub struct PcaFactors {
    /// `T x r`, normalised so that `F'F / T = I_r`.
    pub factors: Matrix,
    /// `N x r`, equal to `R'F / T`.
    pub loadings: Matrix,
    /// All eigenvalues of `RR' / (T N)` in descending order.
    pub eigenvalues: Vec<f64>,
    /// Set when one of the retained eigenvalues is numerically zero.
    pub degenerate: bool,
}

impl PcaFactors {
    pub fn reconstruct(&self) -> Matrix {
        &self.factors * self.loadings.transpose()
    }
}

/// Asymptotic principal components of a complete `T x N` matrix.
///
/// The smaller Gram matrix is decomposed: `RR'` when `T <= N`, otherwise
/// `R'R` with the factors recovered as `R v / sqrt(mu)`. Each factor column
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_factors(resid: &Matrix, r: usize) -> Result<PcaFactors> {
    let (t, n) = resid.shape();
    if let Some(k) = resid.iter().position(|v| !v.is_finite()) {
        return Err(Error::IncompleteMatrix {
            row: k % t,
            col: k / t,
        });
    }
    if r > t.min(n) {
        return Err(Error::TooManyFactors {
            requested: r,
            rows: t,
            cols: n,
        });
    }
    let scale = (t * n) as f64;
    let tf = t as f64;

    let (eigenvalues, mut factors, degenerate) = if t <= n {
        let (vals, vecs) = sym_eigen_desc(&(resid * resid.transpose()));
        let degenerate = is_degenerate(&vals, r);
        let f = vecs.columns(0, r).into_owned() * tf.sqrt();
        (vals, f, degenerate)
    } else {
        let (vals, vecs) = sym_eigen_desc(&(resid.transpose() * resid));
        if is_degenerate(&vals, r) {
            // cross-multiplication breaks down on a zero eigenvalue; use the
            // T x T problem, whose null-space vectors are still orthonormal
            let (_, vecs_t) = sym_eigen_desc(&(resid * resid.transpose()));
            let f = vecs_t.columns(0, r).into_owned() * tf.sqrt();
            (vals, f, true)
        } else {
            let mut f = Matrix::zeros(t, r);
            for k in 0..r {
                let u = resid * vecs.column(k) / vals[k].sqrt();
                f.set_column(k, &(u * tf.sqrt()));
            }
            (vals, f, false)
        }
    };
    if degenerate {
        log::warn!("pca_factors: r = {r} reaches a zero eigenvalue; trailing factors are arbitrary");
    }
    fix_column_signs(&mut factors);
    let loadings = resid.transpose() * &factors / tf;
    Ok(PcaFactors {
        factors,
        loadings,
        eigenvalues: eigenvalues.iter().map(|v| v.max(0.0) / scale).collect(),
        degenerate,
    })
}

fn is_degenerate(sorted_desc: &[f64], r: usize) -> bool {
    if r == 0 {
        return false;
    }
    let max = sorted_desc.first().copied().unwrap_or(0.0).max(0.0);
    let tol = max * f64::EPSILON * 1e3 * sorted_desc.len() as f64;
    sorted_desc[r - 1] <= tol
}

/// Penalty used in the factor-count information criterion
/// `IC(k) = ln V(k) + k * g(N, T)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcPenalty {
    /// `g = (N+T)/(NT) * ln(NT/(N+T))`
    Ic1,
    /// `g = (N+T)/(NT) * ln(min(N, T))`
    #[default]
    Ic2,
    /// `g = ln(min(N, T)) / min(N, T)`
    Ic3,
}

impl IcPenalty {
    fn per_factor(self, n: usize, t: usize) -> f64 {
        let (nf, tf) = (n as f64, t as f64);
        let c = nf.min(tf);
        match self {
            IcPenalty::Ic1 => (nf + tf) / (nf * tf) * (nf * tf / (nf + tf)).ln(),
            IcPenalty::Ic2 => (nf + tf) / (nf * tf) * c.ln(),
            IcPenalty::Ic3 => c.ln() / c,
        }
    }
}

/// Information-criterion values `IC(0..=r_max)` for one complete block and
/// the minimising `k`.
pub fn information_criterion(block: &Matrix, r_max: usize, penalty: IcPenalty) -> (usize, Vec<f64>) {
    let (t, n) = block.shape();
    let gram = if t <= n {
        block * block.transpose()
    } else {
        block.transpose() * block
    };
    let (vals, _) = sym_eigen_desc(&gram);
    let nt = (n * t) as f64;
    let total: f64 = block.iter().map(|v| v * v).sum();
    let r_max = r_max.min(t.min(n).saturating_sub(1));
    // V(k) below this floor is rounding noise
    let floor = (total / nt) * f64::EPSILON * 64.0;
    let g = penalty.per_factor(n, t);

    let mut removed = 0.0;
    let mut ic = Vec::with_capacity(r_max + 1);
    for k in 0..=r_max {
        if k > 0 {
            removed += vals[k - 1].max(0.0);
        }
        let v = ((total - removed) / nt).max(floor).max(f64::MIN_POSITIVE);
        ic.push(v.ln() + k as f64 * g);
    }
    let best = ic
        .iter()
        .enumerate()
        .fold(0, |best, (k, v)| if *v < ic[best] { k } else { best });
    (best, ic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FactorCount {
    pub r: usize,
    pub r_tall: usize,
    pub r_wide: usize,
}

/// Estimates the factor count on the TALL and WIDE blocks and keeps the
/// larger of the two.
pub fn select_r(tall: &Matrix, wide: &Matrix, r_max: usize, penalty: IcPenalty) -> FactorCount {
    let (r_tall, _) = information_criterion(tall, r_max, penalty);
    let (r_wide, _) = information_criterion(wide, r_max, penalty);
    FactorCount {
        r: r_tall.max(r_wide),
        r_tall,
        r_wide,
    }
}

/// `min(8, floor(min(T0, N0) / 3))`
pub fn default_r_max(t0: usize, n0: usize) -> usize {
    (t0.min(n0) / 3).min(8)
}

/// Loadings from per-unit regressions of residuals on `[1 F]`.
#[derive(Debug, Clone)]
pub struct TwoStepLoadings {
    /// `N x (r + 1)`; column 0 is the unit intercept.
    pub loadings: Matrix,
    /// Rows entering each unit's regression.
    pub rows_used: Vec<usize>,
    /// Units whose design was singular and solved by pseudo-inverse.
    pub singular_units: Vec<usize>,
}

/// For each unit `i`, regresses `R[0..t0[i], i]` on `[1, F[0..t0[i], :]]`.
///
/// Rows where the residual or the factor row is missing are skipped. At
/// least `r + 2` usable rows are required per unit.
pub fn loadings_two_step(
    resid: &Matrix,
    factors: &Matrix,
    t0: &[usize],
    units: &[String],
) -> Result<TwoStepLoadings> {
    let (t, n) = resid.shape();
    let r = factors.ncols();
    if factors.nrows() != t || t0.len() != n || units.len() != n {
        return Err(Error::Dimension(format!(
            "residuals {:?}, factors {:?}, {} pre-periods, {} unit names",
            resid.shape(),
            factors.shape(),
            t0.len(),
            units.len()
        )));
    }
    let factor_row_ok: Vec<bool> = (0..t)
        .map(|s| factors.row(s).iter().all(|v| v.is_finite()))
        .collect();

    let fits: Vec<Result<(DVector<f64>, usize, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rows: Vec<usize> = (0..t0[i].min(t))
                .filter(|&s| factor_row_ok[s] && resid[(s, i)].is_finite())
                .collect();
            if rows.len() < r + 2 {
                return Err(Error::RankDeficientUnit {
                    unit: units[i].clone(),
                    rows: rows.len(),
                    needed: r + 2,
                    factors: r,
                });
            }
            let design = Matrix::from_fn(rows.len(), r + 1, |k, c| {
                if c == 0 {
                    1.0
                } else {
                    factors[(rows[k], c - 1)]
                }
            });
            let target = DVector::from_iterator(rows.len(), rows.iter().map(|&s| resid[(s, i)]));
            let (coef, singular) = least_squares(&design, &target);
            Ok((coef, rows.len(), singular))
        })
        .collect();

    let mut loadings = Matrix::zeros(n, r + 1);
    let mut rows_used = Vec::with_capacity(n);
    let mut singular_units = Vec::new();
    for (i, fit) in fits.into_iter().enumerate() {
        let (coef, used, singular) = fit?;
        loadings.set_row(i, &coef.transpose());
        rows_used.push(used);
        if singular {
            log::warn!("loadings_two_step: singular design for unit '{}', used pseudo-inverse", units[i]);
            singular_units.push(i);
        }
    }
    Ok(TwoStepLoadings {
        loadings,
        rows_used,
        singular_units,
    })
}

/// `[1_T F] Lambda'`
pub fn reconstruct_common(factors: &Matrix, loadings: &Matrix) -> Result<Matrix> {
    let r = factors.ncols();
    if loadings.ncols() != r + 1 {
        return Err(Error::Dimension(format!(
            "loadings have {} columns, expected {}",
            loadings.ncols(),
            r + 1
        )));
    }
    let t = factors.nrows();
    let augmented = Matrix::from_fn(t, r + 1, |s, c| if c == 0 { 1.0 } else { factors[(s, c - 1)] });
    Ok(augmented * loadings.transpose())
}

/// Factors and intercept-augmented loadings for the whole panel.
#[derive(Debug, Clone)]
pub struct FactorModel {
    /// `T x r`; rows outside the estimation sample are `NaN`.
    pub factors: Matrix,
    /// `N x (r + 1)`, intercept first.
    pub loadings: Matrix,
    pub r: usize,
}

impl FactorModel {
    pub fn common(&self) -> Matrix {
        reconstruct_common(&self.factors, &self.loadings).expect("conformable by construction")
    }

    /// Loadings without the intercept column.
    pub fn factor_loadings(&self) -> Matrix {
        self.loadings.columns(1, self.r).into_owned()
    }
}
