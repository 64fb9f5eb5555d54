//! Slope estimation under interactive fixed effects on the control block.
//!
//! Model: `Y_it = alpha_i + X_it'beta + Z_it'gamma + Lambda_i'F_t + e_it`.
//! The fit alternates pooled least squares for the slopes (within unit) with
//! principal components on the slope residuals, starting from the factorless
//! least-squares solution. Only rows complete across the whole control block
//! are used.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::pca_factors;
use crate::linalg::{demean_columns, select_rows};
use crate::panel::{Covariate, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfeOptions {
    /// Relative change in the objective that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IfeOptions {
    fn default() -> Self {
        IfeOptions {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IfeFit {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Unit intercepts of the control units.
    pub alpha: Vec<f64>,
    /// `T x r` control-block factors; `NaN` on rows left out of the fit.
    #[serde(skip)]
    pub factors: Matrix,
    /// `N0 x r`
    #[serde(skip)]
    pub loadings: Matrix,
    /// Rows of the panel used by the fit.
    pub rows: Vec<usize>,
    pub r: usize,
    /// Sum of squared residuals, starting with the factorless fit.
    pub objective_path: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl IfeFit {
    /// `beta` followed by `gamma`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.beta.iter().chain(self.gamma.iter()).copied().collect()
    }

    pub fn k(&self) -> usize {
        self.beta.len() + self.gamma.len()
    }
}

pub fn fit_ife(
    y0: &Matrix,
    x0: &[Covariate],
    z0: &[Covariate],
    r: usize,
    opts: &IfeOptions,
) -> Result<IfeFit> {
    let (t, n0) = y0.shape();
    let covs: Vec<&Covariate> = x0.iter().chain(z0.iter()).collect();
    for c in &covs {
        if c.values.shape() != (t, n0) {
            return Err(Error::Dimension(format!(
                "covariate '{}' is {:?}, control block is {:?}",
                c.name,
                c.values.shape(),
                (t, n0)
            )));
        }
    }
    let rows: Vec<usize> = (0..t)
        .filter(|&s| {
            (0..n0).all(|i| y0[(s, i)].is_finite() && covs.iter().all(|c| c.values[(s, i)].is_finite()))
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::NoCompleteRows);
    }
    let tn = rows.len();
    if r > tn.min(n0) {
        return Err(Error::TooManyFactors {
            requested: r,
            rows: tn,
            cols: n0,
        });
    }

    let y_sub = select_rows(y0, &rows);
    let (y_w, _) = demean_columns(&y_sub);
    let k = covs.len();
    let mut w_raw = Vec::with_capacity(k);
    let mut w = Vec::with_capacity(k);
    let mut scales = Vec::with_capacity(k);
    for c in &covs {
        let sub = select_rows(&c.values, &rows);
        let (centred, _) = demean_columns(&sub);
        let rms = (centred.norm_squared() / (tn * n0) as f64).sqrt();
        let raw_rms = (sub.norm_squared() / (tn * n0) as f64).sqrt();
        if rms <= 1e-12 * raw_rms.max(f64::MIN_POSITIVE) || rms == 0.0 {
            return Err(Error::CollinearCovariates {
                column: c.name.clone(),
                against: "the unit intercepts".into(),
            });
        }
        scales.push(rms);
        w.push(centred / rms);
        w_raw.push(sub);
    }
    check_rank(&w, &covs)?;

    let design = if k > 0 {
        Matrix::from_fn(tn * n0, k, |cell, j| w[j].as_slice()[cell])
    } else {
        Matrix::zeros(tn * n0, 0)
    };
    let gram_inv = if k > 0 {
        (design.transpose() * &design)
            .cholesky()
            .ok_or_else(|| Error::CollinearCovariates {
                column: covs[k - 1].name.clone(),
                against: "the other covariates".into(),
            })?
            .inverse()
    } else {
        Matrix::zeros(0, 0)
    };
    let ols = |target: &Matrix| -> DVector<f64> {
        if k == 0 {
            return DVector::zeros(0);
        }
        let v = DVector::from_column_slice(target.as_slice());
        &gram_inv * (design.transpose() * v)
    };
    let slope_part = |b: &DVector<f64>| -> Matrix {
        let mut out = Matrix::zeros(tn, n0);
        for (j, wj) in w.iter().enumerate() {
            out += wj * b[j];
        }
        out
    };

    let mut beta_std = ols(&y_w);
    let mut objective_path = vec![(&y_w - slope_part(&beta_std)).norm_squared()];
    let mut converged = r == 0 || k == 0;
    let mut iterations = 0;
    let floor = y_w.norm_squared() * 1e-12;

    if !converged {
        for _ in 0..opts.max_iter {
            iterations += 1;
            let pca = pca_factors(&(&y_w - slope_part(&beta_std)), r)?;
            let common = pca.reconstruct();
            beta_std = ols(&(&y_w - &common));
            let obj = (&y_w - slope_part(&beta_std) - &common).norm_squared();
            let prev = *objective_path.last().unwrap();
            objective_path.push(obj);
            if (prev - obj).abs() <= opts.tol * (prev + floor) {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("fit_ife: no convergence after {} iterations", opts.max_iter);
        }
    }

    let resid_w = &y_w - slope_part(&beta_std);
    let pca = pca_factors(&resid_w, r)?;
    let mut factors = Matrix::from_element(t, r, f64::NAN);
    for (k_row, &s) in rows.iter().enumerate() {
        factors.set_row(s, &pca.factors.row(k_row));
    }

    let coef: Vec<f64> = (0..k).map(|j| beta_std[j] / scales[j]).collect();
    let alpha = (0..n0)
        .map(|i| {
            let mut s = 0.0;
            for row in 0..tn {
                let mut v = y_sub[(row, i)];
                for j in 0..k {
                    v -= w_raw[j][(row, i)] * coef[j];
                }
                s += v;
            }
            s / tn as f64
        })
        .collect();

    Ok(IfeFit {
        beta: coef[..x0.len()].to_vec(),
        gamma: coef[x0.len()..].to_vec(),
        alpha,
        factors,
        loadings: pca.loadings,
        rows,
        r,
        objective_path,
        converged,
        iterations,
    })
}

/// Sequential Gram-Schmidt on the within-transformed covariates; names the
/// first column that lies in the span of the earlier ones.
fn check_rank(w: &[Matrix], covs: &[&Covariate]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (j, wj) in w.iter().enumerate() {
        let mut v = DVector::from_column_slice(wj.as_slice());
        let norm0 = v.norm();
        for b in &basis {
            let p = b.dot(&v);
            v -= b * p;
        }
        let norm = v.norm();
        if norm <= 1e-8 * norm0 {
            let against = covs[..j]
                .iter()
                .map(|c| format!("'{}'", c.name))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::CollinearCovariates {
                column: covs[j].name.clone(),
                against: if against.is_empty() {
                    "the unit intercepts".into()
                } else {
                    format!("{against} and the unit intercepts")
                },
            });
        }
        basis.push(v / norm);
    }
    Ok(())
}

/// `R = Y - X beta - Z gamma`; missing cells stay missing.
pub fn residualize(y: &Matrix, x: &[Covariate], z: &[Covariate], beta: &[f64], gamma: &[f64]) -> Result<Matrix> {
    if x.len() != beta.len() || z.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "{} X covariates for {} beta, {} Z covariates for {} gamma",
            x.len(),
            beta.len(),
            z.len(),
            gamma.len()
        )));
    }
    let mut r = y.clone();
    for (c, b) in x.iter().zip(beta).chain(z.iter().zip(gamma)) {
        if c.values.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "covariate '{}' is {:?}, outcome is {:?}",
                c.name,
                c.values.shape(),
                y.shape()
            )));
        }
        r -= &c.values * *b;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    struct Dgp {
        y: Matrix,
        x: Vec<Covariate>,
        z: Vec<Covariate>,
        f: Matrix,
    }

    fn dgp(seed: u64, t: usize, n: usize, r: usize, noise: f64) -> Dgp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gaussian(&mut rng, t, r);
        let lam = gaussian(&mut rng, n, r);
        let alpha = gaussian(&mut rng, 1, n);
        let common = &f * lam.transpose();
        // covariates correlated with the factor structure
        let x1 = gaussian(&mut rng, t, n) + &common * 0.5;
        let x2 = gaussian(&mut rng, t, n) + Matrix::from_fn(t, n, |s, _| f[(s, 0)] * 0.3);
        let z1 = gaussian(&mut rng, t, n);
        let e = gaussian(&mut rng, t, n) * noise;
        let y = Matrix::from_fn(t, n, |s, i| alpha[(0, i)] + 1.5 * x1[(s, i)] - 0.5 * x2[(s, i)] + 0.8 * z1[(s, i)])
            + &common
            + e;
        Dgp {
            y,
            x: vec![Covariate::new("x1", x1), Covariate::new("x2", x2)],
            z: vec![Covariate::new("z1", z1)],
            f,
        }
    }

    #[test]
    fn factorless_fit_is_within_ols() {
        let d = dgp(1, 30, 12, 2, 0.3);
        let fit = fit_ife(&d.y, &d.x, &d.z, 0, &IfeOptions::default()).unwrap();
        assert!(fit.converged);
        // least squares on unit dummies plus covariates, normal equations
        let (t, n) = d.y.shape();
        let k = 3;
        let p = n + k;
        let mut xtx = Matrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for s in 0..t {
            for i in 0..n {
                let mut row = DVector::zeros(p);
                row[i] = 1.0;
                row[n] = d.x[0].values[(s, i)];
                row[n + 1] = d.x[1].values[(s, i)];
                row[n + 2] = d.z[0].values[(s, i)];
                xtx += &row * row.transpose();
                xty += &row * d.y[(s, i)];
            }
        }
        let sol = xtx.try_inverse().unwrap() * xty;
        let coef = fit.coefficients();
        for j in 0..k {
            assert!((coef[j] - sol[n + j]).abs() < 1e-8, "{j}: {} vs {}", coef[j], sol[n + j]);
        }
        for i in 0..n {
            assert!((fit.alpha[i] - sol[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn noiseless_coefficients_recovered() {
        let d = dgp(2, 40, 20, 2, 0.0);
        let fit = fit_ife(&d.y, &d.x, &d.z, 2, &IfeOptions::default()).unwrap();
        assert!((fit.beta[0] - 1.5).abs() < 1e-6, "{:?}", fit.beta);
        assert!((fit.beta[1] + 0.5).abs() < 1e-6, "{:?}", fit.beta);
        assert!((fit.gamma[0] - 0.8).abs() < 1e-6, "{:?}", fit.gamma);
    }

    #[test]
    fn objective_path_non_increasing() {
        for seed in 0..20 {
            let d = dgp(100 + seed, 25, 15, 2, 0.5);
            let fit = fit_ife(&d.y, &d.x, &d.z, 2, &IfeOptions::default()).unwrap();
            for w in fit.objective_path.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {w:?}");
            }
        }
    }

    #[test]
    fn residuals_orthogonal_at_convergence() {
        let d = dgp(7, 40, 25, 2, 0.2);
        let fit = fit_ife(&d.y, &d.x, &d.z, 2, &IfeOptions { tol: 1e-14, max_iter: 5000 }).unwrap();
        let r = residualize(&d.y, &d.x, &d.z, &fit.beta, &fit.gamma).unwrap();
        let (rw, _) = demean_columns(&r);
        let e = &rw - &fit.factors * fit.loadings.transpose();
        for c in d.x.iter().chain(d.z.iter()) {
            let dot = e.dot(&c.values) / (e.norm() * c.values.norm());
            assert!(dot.abs() < 1e-6, "{}: {dot}", c.name);
        }
        let fe = fit.factors.transpose() * &e;
        assert!(fe.amax() / e.norm() < 1e-6);
        let _ = d.f;
    }

    #[test]
    fn duplicate_covariate_rejected() {
        let d = dgp(3, 20, 10, 1, 0.1);
        let mut x = d.x.clone();
        x.push(Covariate::new("x1_copy", d.x[0].values.clone()));
        let err = fit_ife(&d.y, &x, &d.z, 1, &IfeOptions::default()).unwrap_err();
        match err {
            Error::CollinearCovariates { column, against } => {
                assert_eq!(column, "x1_copy");
                assert!(against.contains("'x1'"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unit_constant_covariate_rejected() {
        let d = dgp(4, 20, 10, 1, 0.1);
        let x = vec![Covariate::new("size", Matrix::from_fn(20, 10, |_, i| i as f64))];
        assert!(matches!(
            fit_ife(&d.y, &x, &[], 1, &IfeOptions::default()),
            Err(Error::CollinearCovariates { .. })
        ));
    }

    #[test]
    fn control_order_does_not_matter() {
        let d = dgp(5, 30, 14, 2, 0.3);
        let fit = fit_ife(&d.y, &d.x, &d.z, 2, &IfeOptions::default()).unwrap();
        let perm: Vec<usize> = (0..14).rev().collect();
        let permute = |m: &Matrix| crate::linalg::select_cols(m, &perm);
        let xs: Vec<Covariate> = d.x.iter().map(|c| Covariate::new(c.name.clone(), permute(&c.values))).collect();
        let zs: Vec<Covariate> = d.z.iter().map(|c| Covariate::new(c.name.clone(), permute(&c.values))).collect();
        let fit_p = fit_ife(&permute(&d.y), &xs, &zs, 2, &IfeOptions::default()).unwrap();
        for (a, b) in fit.coefficients().iter().zip(fit_p.coefficients()) {
            assert!((a - b).abs() < 1e-9);
        }
        let c = &fit.factors * fit.loadings.transpose();
        let cp = permute(&c);
        let c2 = &fit_p.factors * fit_p.loadings.transpose();
        assert!((cp - c2).amax() < 1e-8);
    }

    #[test]
    fn masked_rows_are_excluded() {
        let mut d = dgp(6, 30, 12, 1, 0.0);
        for s in 0..5 {
            for i in 0..12 {
                d.x[0].values[(s, i)] = f64::NAN;
            }
        }
        d.y[(10, 3)] = f64::NAN;
        let fit = fit_ife(&d.y, &d.x, &d.z, 2, &IfeOptions::default()).unwrap();
        assert_eq!(fit.rows.len(), 24);
        assert!(!fit.rows.contains(&10));
        assert!(fit.factors.row(2).iter().all(|v| v.is_nan()));
        assert!((fit.beta[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn no_covariates() {
        let d = dgp(8, 20, 10, 1, 0.1);
        let fit = fit_ife(&d.y, &[], &[], 1, &IfeOptions::default()).unwrap();
        assert!(fit.beta.is_empty() && fit.gamma.is_empty());
        assert!(fit.converged);
    }

    #[test]
    fn residualize_identity_and_toy() {
        let y = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, f64::NAN, 5.0, 6.0]);
        assert_eq!(
            residualize(&y, &[], &[], &[], &[]).unwrap().as_slice()[..3],
            y.as_slice()[..3]
        );
        let x = Covariate::new("x", Matrix::from_row_slice(3, 2, &[0.5, 1.0, 1.5, 2.0, f64::NAN, 3.0]));
        let z = Covariate::new("z", Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let r = residualize(&y, std::slice::from_ref(&x), std::slice::from_ref(&z), &[2.0], &[-1.0]).unwrap();
        for s in 0..3 {
            for i in 0..2 {
                let expect = y[(s, i)] - 2.0 * x.values[(s, i)] + z.values[(s, i)];
                if expect.is_nan() {
                    assert!(r[(s, i)].is_nan());
                } else {
                    assert!((r[(s, i)] - expect).abs() < 1e-12);
                }
            }
        }
        let zero = residualize(&y, &[x], &[z], &[0.0], &[0.0]).unwrap();
        assert!((zero[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
