//! Counterfactual imputation of the MISS block.
//!
//! Residuals `R = Y - X beta - Z gamma` are formed for the whole panel,
//! factors are extracted from the (unit-demeaned) TALL block of `R`, every
//! unit's intercept and loadings are fitted on its own pre-treatment rows,
//! and `Y(0)` is rebuilt as `X beta + Z gamma + [1 F] Lambda'`.

use crate::error::{Error, Result};
use crate::factor::{loadings_two_step, pca_factors, reconstruct_common, FactorModel};
use crate::ife::{residualize, IfeFit};
use crate::linalg::{demean_columns, select_cols, select_rows};
use crate::panel::{BlockDecomposition, Matrix, PanelDataset};

#[derive(Debug, Clone)]
pub struct ImputedPanel {
    /// Fitted untreated outcomes for every cell; `NaN` where the factor row
    /// or a covariate is unavailable.
    pub y0_hat: Matrix,
    /// Common component `[1 F] Lambda'`.
    pub c_tilde: Matrix,
    /// `Y - X beta - Z gamma`.
    pub residuals: Matrix,
    pub factor_model: FactorModel,
    /// Principal-component loadings of the control units (`N0 x r`), in the
    /// order of `BlockDecomposition::control_units`.
    pub tall_loadings: Matrix,
    /// Panel rows that entered factor extraction.
    pub tall_rows: Vec<usize>,
    pub fit: IfeFit,
    pub singular_units: Vec<usize>,
}

impl ImputedPanel {
    pub fn r(&self) -> usize {
        self.factor_model.r
    }

    /// Idiosyncratic residual `R - C~` on untreated cells, `NaN` elsewhere.
    pub fn idiosyncratic(&self, blocks: &BlockDecomposition) -> Matrix {
        let (t, n) = self.residuals.shape();
        Matrix::from_fn(t, n, |s, i| {
            if blocks.is_miss(s, i) {
                f64::NAN
            } else {
                self.residuals[(s, i)] - self.c_tilde[(s, i)]
            }
        })
    }
}

pub fn impute_counterfactuals(
    dataset: &PanelDataset,
    blocks: &BlockDecomposition,
    fit: &IfeFit,
    r: usize,
) -> Result<ImputedPanel> {
    if blocks.n_units != dataset.n_units() || blocks.n_periods != dataset.n_periods() {
        return Err(Error::Dimension(format!(
            "blocks describe a {}x{} panel, dataset is {}x{}",
            blocks.n_periods,
            blocks.n_units,
            dataset.n_periods(),
            dataset.n_units()
        )));
    }
    if fit.alpha.len() != blocks.n0() {
        return Err(Error::Dimension(format!(
            "fit has {} control intercepts, blocks have {} controls",
            fit.alpha.len(),
            blocks.n0()
        )));
    }
    let t = dataset.n_periods();
    let residuals = residualize(dataset.y(), dataset.x(), dataset.z(), &fit.beta, &fit.gamma)?;

    let tall = select_cols(&residuals, &blocks.control_units);
    let tall_rows: Vec<usize> = (0..t)
        .filter(|&s| tall.row(s).iter().all(|v| v.is_finite()))
        .collect();
    if tall_rows.is_empty() {
        return Err(Error::NoCompleteRows);
    }
    let (tall_centred, _) = demean_columns(&select_rows(&tall, &tall_rows));
    let pca = pca_factors(&tall_centred, r)?;
    let mut factors = Matrix::from_element(t, r, f64::NAN);
    for (k, &s) in tall_rows.iter().enumerate() {
        factors.set_row(s, &pca.factors.row(k));
    }

    let two_step = loadings_two_step(&residuals, &factors, dataset.t0(), dataset.units())?;
    let c_tilde = reconstruct_common(&factors, &two_step.loadings)?;

    let mut y0_hat = c_tilde.clone();
    for (c, b) in dataset
        .x()
        .iter()
        .zip(&fit.beta)
        .chain(dataset.z().iter().zip(&fit.gamma))
    {
        y0_hat += &c.values * *b;
    }

    Ok(ImputedPanel {
        y0_hat,
        c_tilde,
        residuals,
        factor_model: FactorModel {
            factors,
            loadings: two_step.loadings,
            r,
        },
        tall_loadings: pca.loadings,
        tall_rows,
        fit: fit.clone(),
        singular_units: two_step.singular_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ife::{fit_ife, IfeOptions};
    use crate::panel::{decompose_blocks, Covariate};
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn calendar(t: usize) -> Vec<NaiveDate> {
        let d0 = NaiveDate::from_ymd_opt(2020, 2, 20).unwrap();
        (0..t).map(|s| d0 + chrono::Days::new(s as u64)).collect()
    }

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    struct Case {
        dataset: PanelDataset,
        y0_true: Matrix,
    }

    fn planted(seed: u64, t: usize, n0: usize, adoption: &[usize], effect: f64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n0 + adoption.len();
        let f = gaussian(&mut rng, t, 2);
        let lam = gaussian(&mut rng, n, 2);
        let x = gaussian(&mut rng, t, n);
        let y0_true = Matrix::from_fn(t, n, |s, i| 0.3 + 0.7 * x[(s, i)]) + &f * lam.transpose();
        let mut adopt: Vec<Option<usize>> = vec![None; n0];
        adopt.extend(adoption.iter().map(|&a| Some(a)));
        let y = Matrix::from_fn(t, n, |s, i| match adopt[i] {
            Some(a) if s >= a => y0_true[(s, i)] + effect,
            _ => y0_true[(s, i)],
        });
        let units = (0..n).map(|i| format!("u{i}")).collect();
        let dataset = PanelDataset::from_adoption(units, calendar(t), y, &adopt, vec![Covariate::new("x", x)], vec![])
            .unwrap();
        Case { dataset, y0_true }
    }

    fn run(case: &Case, r: usize) -> (BlockDecomposition, ImputedPanel) {
        let ds = &case.dataset;
        let blocks = decompose_blocks(ds, false).unwrap();
        let y0 = select_cols(ds.y(), &blocks.control_units);
        let x0: Vec<Covariate> = ds
            .x()
            .iter()
            .map(|c| Covariate::new(c.name.clone(), select_cols(&c.values, &blocks.control_units)))
            .collect();
        let fit = fit_ife(&y0, &x0, &[], r, &IfeOptions::default()).unwrap();
        let imp = impute_counterfactuals(ds, &blocks, &fit, r).unwrap();
        (blocks, imp)
    }

    #[test]
    fn noiseless_miss_block_is_exact() {
        let case = planted(1, 40, 12, &[20, 25, 30, 22], 0.1);
        let (blocks, imp) = run(&case, 2);
        for (s, i) in blocks.miss_cells() {
            assert!((imp.y0_hat[(s, i)] - case.y0_true[(s, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn tall_common_component_is_pca_reconstruction() {
        let mut case = planted(2, 30, 10, &[15, 18], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = gaussian(&mut rng, 30, 12) * 0.2;
        let y = case.dataset.y() + noise;
        case.dataset = PanelDataset::new(
            case.dataset.units().to_vec(),
            case.dataset.dates().to_vec(),
            y,
            case.dataset.d().clone(),
            case.dataset.x().to_vec(),
            vec![],
        )
        .unwrap();
        let (blocks, imp) = run(&case, 2);
        let tall = select_cols(&imp.residuals, &blocks.control_units);
        let (centred, means) = demean_columns(&tall);
        let recon = pca_factors(&centred, 2).unwrap().reconstruct();
        for (k, &i) in blocks.control_units.iter().enumerate() {
            for s in 0..30 {
                assert!((imp.c_tilde[(s, i)] - (recon[(s, k)] + means[k])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn invariant_to_treated_relabeling() {
        let case = planted(3, 36, 10, &[18, 24, 20], 0.05);
        let (_, imp) = run(&case, 2);
        // swap the last two (treated) units
        let ds = &case.dataset;
        let n = ds.n_units();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        let y = select_cols(ds.y(), &perm);
        let x = vec![Covariate::new("x", select_cols(&ds.x()[0].values, &perm))];
        let d = nalgebra::DMatrix::from_fn(ds.n_periods(), n, |s, i| ds.d()[(s, perm[i])]);
        let units = perm.iter().map(|&i| ds.units()[i].clone()).collect();
        let swapped = Case {
            dataset: PanelDataset::new(units, ds.dates().to_vec(), y, d, x, vec![]).unwrap(),
            y0_true: case.y0_true.clone(),
        };
        let (_, imp2) = run(&swapped, 2);
        let back = select_cols(&imp2.y0_hat, &perm);
        assert!((back - &imp.y0_hat).amax() < 1e-10);
    }

    /// Two-way fixed effects on untreated cells by alternating projections,
    /// then `alpha_i + xi_t` as the counterfactual.
    fn twfe_oracle(y: &Matrix, untreated: impl Fn(usize, usize) -> bool) -> Matrix {
        let (t, n) = y.shape();
        let mut alpha = vec![0.0; n];
        let mut xi = vec![0.0; t];
        for _ in 0..20000 {
            for i in 0..n {
                let (mut s_sum, mut cnt) = (0.0, 0.0);
                for s in 0..t {
                    if untreated(s, i) {
                        s_sum += y[(s, i)] - xi[s];
                        cnt += 1.0;
                    }
                }
                alpha[i] = s_sum / cnt;
            }
            for s in 0..t {
                let (mut s_sum, mut cnt) = (0.0, 0.0);
                for i in 0..n {
                    if untreated(s, i) {
                        s_sum += y[(s, i)] - alpha[i];
                        cnt += 1.0;
                    }
                }
                xi[s] = s_sum / cnt;
            }
        }
        Matrix::from_fn(t, n, |s, i| alpha[i] + xi[s])
    }

    #[test]
    fn additive_special_case_matches_two_way_fixed_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, n0, n) = (30, 8, 12);
        let alpha: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xi: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        let adopt: Vec<Option<usize>> = (0..n).map(|i| (i >= n0).then_some(15 + i - n0)).collect();
        let y = Matrix::from_fn(t, n, |s, i| {
            alpha[i] + xi[s] + if adopt[i].is_some_and(|a| s >= a) { -0.2 } else { 0.0 }
        });
        let units = (0..n).map(|i| format!("u{i}")).collect();
        let ds = PanelDataset::from_adoption(units, calendar(t), y.clone(), &adopt, vec![], vec![]).unwrap();
        let blocks = decompose_blocks(&ds, false).unwrap();
        let y0 = select_cols(ds.y(), &blocks.control_units);
        let fit = fit_ife(&y0, &[], &[], 1, &IfeOptions::default()).unwrap();
        let imp = impute_counterfactuals(&ds, &blocks, &fit, 1).unwrap();
        let oracle = twfe_oracle(&y, |s, i| !blocks.is_miss(s, i));
        for (s, i) in blocks.miss_cells() {
            assert!((imp.y0_hat[(s, i)] - oracle[(s, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn short_pre_period_is_reported() {
        let case = planted(5, 30, 10, &[3], 0.0);
        let ds = &case.dataset;
        let blocks = decompose_blocks(ds, false).unwrap();
        let y0 = select_cols(ds.y(), &blocks.control_units);
        let x0 = vec![Covariate::new("x", select_cols(&ds.x()[0].values, &blocks.control_units))];
        let fit = fit_ife(&y0, &x0, &[], 2, &IfeOptions::default()).unwrap();
        match impute_counterfactuals(ds, &blocks, &fit, 2) {
            Err(Error::RankDeficientUnit { unit, rows, .. }) => assert_eq!((unit.as_str(), rows), ("u10", 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn more_controls_never_hurt_noiseless() {
        let case = planted(6, 40, 14, &[20, 26], 0.1);
        let err_with = |n_ctrl: usize| -> f64 {
            let ds = &case.dataset;
            let keep: Vec<usize> = (0..n_ctrl).chain(14..16).collect();
            let y = select_cols(ds.y(), &keep);
            let x = vec![Covariate::new("x", select_cols(&ds.x()[0].values, &keep))];
            let d = nalgebra::DMatrix::from_fn(40, keep.len(), |s, i| ds.d()[(s, keep[i])]);
            let units = keep.iter().map(|&i| ds.units()[i].clone()).collect();
            let sub = Case {
                dataset: PanelDataset::new(units, ds.dates().to_vec(), y, d, x, vec![]).unwrap(),
                y0_true: select_cols(&case.y0_true, &keep),
            };
            let (blocks, imp) = run(&sub, 2);
            blocks
                .miss_cells()
                .iter()
                .map(|&(s, i)| (imp.y0_hat[(s, i)] - sub.y0_true[(s, i)]).abs())
                .fold(0.0, f64::max)
        };
        let small = err_with(6);
        let large = err_with(14);
        assert!(large <= small.max(1e-8));
    }
}
