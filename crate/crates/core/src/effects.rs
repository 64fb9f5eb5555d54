//! Unit, average and group treatment effects with closed-form variances.
//!
//! Effects are aligned on event time: `s = t - T0_i`, so `s = 0` is the
//! first treated day (the announcement day under the default policy
//! column). Variances follow the large-factor-model decomposition
//!
//! ```text
//! V = delta^2 * [ F-term / T0  +  loading-term / N0  +  error-term ]
//! ```
//!
//! with `delta = min(sqrt(N0), sqrt(N1))`; standard errors are `sqrt(V) / delta`,
//! so `delta` only rescales the reported variance.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::impute::ImputedPanel;
use crate::linalg::sym_inverse;
use crate::panel::{residual_dof, BlockDecomposition, Matrix, PanelDataset};

/// A named subset of treated units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub units: Vec<String>,
}

impl Group {
    pub fn new(name: impl Into<String>, units: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Group {
            name: name.into(),
            units: units.into_iter().map(Into::into).collect(),
        }
    }
}

/// Event-time aligned mean of unit effects.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSeries {
    pub event_time: Vec<usize>,
    pub estimate: Vec<f64>,
    /// Units contributing at each event time.
    pub n_units: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupEffects {
    pub name: String,
    /// Panel column indices of the members.
    pub members: Vec<usize>,
    pub series: EventSeries,
}

#[derive(Debug, Clone)]
pub struct EffectsBundle {
    /// `Y - Y0_hat` on MISS cells, `NaN` elsewhere.
    pub theta_it: Matrix,
    pub theta_t: EventSeries,
    pub groups: Vec<GroupEffects>,
    /// `min(sqrt(N0), sqrt(N1))`
    pub delta: f64,
    pub treated_units: Vec<usize>,
    pub t0: Vec<usize>,
}

impl EffectsBundle {
    pub fn group(&self, name: &str) -> Option<&GroupEffects> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn delta(n0: usize, n1: usize) -> f64 {
    (n0 as f64).sqrt().min((n1 as f64).sqrt())
}

/// Computes `theta_it`, the event-time ATT and every group's series.
pub fn compute_effects(
    dataset: &PanelDataset,
    blocks: &BlockDecomposition,
    imputed: &ImputedPanel,
    groups: &[Group],
) -> Result<EffectsBundle> {
    let (t, n) = dataset.y().shape();
    if imputed.y0_hat.shape() != (t, n) {
        return Err(Error::Dimension(format!(
            "imputed panel is {:?}, dataset is {:?}",
            imputed.y0_hat.shape(),
            (t, n)
        )));
    }
    let theta_it = Matrix::from_fn(t, n, |s, i| {
        if blocks.is_miss(s, i) {
            dataset.y()[(s, i)] - imputed.y0_hat[(s, i)]
        } else {
            f64::NAN
        }
    });
    let theta_t = event_series(&theta_it, &blocks.treated_units, &blocks.t0);

    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let members = resolve_group(dataset, blocks, g)?;
        let series = event_series(&theta_it, &members, &blocks.t0);
        out.push(GroupEffects {
            name: g.name.clone(),
            members,
            series,
        });
    }
    Ok(EffectsBundle {
        theta_it,
        theta_t,
        groups: out,
        delta: delta(blocks.n0(), blocks.n1()),
        treated_units: blocks.treated_units.clone(),
        t0: blocks.t0.clone(),
    })
}

fn resolve_group(dataset: &PanelDataset, blocks: &BlockDecomposition, g: &Group) -> Result<Vec<usize>> {
    if g.units.is_empty() {
        return Err(Error::EmptyGroup(g.name.clone()));
    }
    let mut members = Vec::with_capacity(g.units.len());
    for u in &g.units {
        let i = dataset.unit_index(u).ok_or_else(|| {
            Error::Config(format!("group '{}' references unknown unit '{}'", g.name, u))
        })?;
        if !blocks.treated_units.contains(&i) {
            return Err(Error::GroupMemberNotTreated {
                group: g.name.clone(),
                unit: u.clone(),
            });
        }
        if !members.contains(&i) {
            members.push(i);
        }
    }
    Ok(members)
}

fn event_series(theta_it: &Matrix, members: &[usize], t0: &[usize]) -> EventSeries {
    let t = theta_it.nrows();
    let horizon = members.iter().map(|&i| t - t0[i]).max().unwrap_or(0);
    let mut series = EventSeries {
        event_time: Vec::new(),
        estimate: Vec::new(),
        n_units: Vec::new(),
    };
    for s in 0..horizon {
        let vals: Vec<f64> = members
            .iter()
            .filter_map(|&i| {
                let row = t0[i] + s;
                (row < t && theta_it[(row, i)].is_finite()).then(|| theta_it[(row, i)])
            })
            .collect();
        if vals.is_empty() {
            continue;
        }
        series.event_time.push(s);
        series.estimate.push(vals.iter().sum::<f64>() / vals.len() as f64);
        series.n_units.push(vals.len());
    }
    series
}

/// Plug-in estimators for the cross-sectional (`Gamma_t`) and time-series
/// (`Phi_i`) score covariances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceEstimator {
    /// Outer products weighted by each squared residual.
    #[default]
    Heteroskedastic,
    /// Outer products scaled by a pooled residual variance.
    Homoskedastic,
}

/// How the group variance scales the error and F-terms with group size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupErrorScaling {
    /// Variance of a group mean: error and F-terms divided by `N_j`.
    #[default]
    GroupMean,
    /// The terms as printed for a single unit, without the `1/N_j` factor.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub level: f64,
    pub covariance: CovarianceEstimator,
    pub group_scaling: GroupErrorScaling,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            level: 0.95,
            covariance: CovarianceEstimator::default(),
            group_scaling: GroupErrorScaling::default(),
        }
    }
}

impl InferenceOptions {
    pub fn with_level(level: f64) -> Self {
        InferenceOptions {
            level,
            ..Default::default()
        }
    }
}

/// The three additive pieces of `V / delta^2` at one event time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceTerms {
    /// Loading-estimation error; zero for the ATT.
    pub factor: f64,
    /// Factor-estimation error.
    pub loading: f64,
    /// Idiosyncratic noise of the treated outcomes.
    pub error: f64,
}

impl VarianceTerms {
    pub fn total(&self) -> f64 {
        self.factor + self.loading + self.error
    }
}

/// Average of the event-time series with a conservative standard error (the
/// mean of the per-time standard errors, i.e. perfect correlation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeAverage {
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub periods: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceResult {
    pub event_time: Vec<usize>,
    pub estimate: Vec<f64>,
    pub n_units: Vec<usize>,
    /// `V_hat`, including the `delta^2` factor.
    pub variance: Vec<f64>,
    pub se: Vec<f64>,
    pub terms: Vec<VarianceTerms>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub delta: f64,
    /// Pooled control residual variance with the degrees-of-freedom divisor.
    pub sigma_e2: f64,
    /// Per calendar row, mean squared residual over the units allowed to
    /// enter (`NaN` where none is available).
    pub sigma_e2_t: Vec<f64>,
    /// `Gamma_t_hat` per calendar row (`r x r`).
    #[serde(skip)]
    pub gamma_hat: Vec<Matrix>,
    /// `Phi_i_hat` per group member (`(r+1) x (r+1)`); empty for the ATT.
    #[serde(skip)]
    pub phi_hat: Vec<Matrix>,
    pub average: TimeAverage,
}

/// Critical value of the standard normal for a two-sided band.
pub fn normal_critical(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} is not in (0, 1)")));
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(z.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Quantities shared by the ATT and group variances.
struct Ingredients {
    /// Idiosyncratic residuals, `NaN` on MISS and unusable cells.
    e: Matrix,
    /// `(Lambda0' Lambda0 / N0)^{-1}`
    a_inv: Matrix,
    gamma: Vec<Matrix>,
    sigma_e2: f64,
    r: usize,
}

fn ingredients(
    blocks: &BlockDecomposition,
    imputed: &ImputedPanel,
    covariance: CovarianceEstimator,
) -> Result<Ingredients> {
    let r = imputed.r();
    let n0 = blocks.n0();
    let t = blocks.n_periods;
    let e = imputed.idiosyncratic(blocks);
    let lam0 = &imputed.tall_loadings;

    let rows = imputed.tall_rows.len();
    let k = imputed.fit.k();
    let dof = residual_dof(rows, n0, r, k);
    if dof <= 0 {
        return Err(Error::NonPositiveDof {
            dof,
            t: rows,
            n0,
            r,
            k,
        });
    }
    let ssr: f64 = imputed
        .tall_rows
        .iter()
        .flat_map(|&s| blocks.control_units.iter().map(move |&i| (s, i)))
        .map(|(s, i)| e[(s, i)].powi(2))
        .sum();
    let sigma_e2 = ssr / dof as f64;

    let a = lam0.transpose() * lam0 / n0 as f64;
    let a_inv = sym_inverse(&a);

    let gamma = (0..t)
        .map(|s| {
            let mut g = Matrix::zeros(r, r);
            for (k, &i) in blocks.control_units.iter().enumerate() {
                let w = match covariance {
                    CovarianceEstimator::Heteroskedastic => e[(s, i)].powi(2),
                    CovarianceEstimator::Homoskedastic => sigma_e2,
                };
                let l = lam0.row(k).transpose();
                g += &l * l.transpose() * w;
            }
            g / n0 as f64
        })
        .collect();
    Ok(Ingredients {
        e,
        a_inv,
        gamma,
        sigma_e2,
        r,
    })
}

/// Factor-estimation term for the mean over `cells` (unit, calendar row):
/// units sharing a calendar row share the same factor error.
fn loading_term(ing: &Ingredients, imputed: &ImputedPanel, cells: &[(usize, usize)]) -> f64 {
    let r = ing.r;
    if r == 0 {
        return 0.0;
    }
    let n = cells.len() as f64;
    let mut rows: Vec<usize> = cells.iter().map(|c| c.1).collect();
    rows.sort_unstable();
    rows.dedup();
    let lam = &imputed.factor_model.loadings;
    rows.iter()
        .map(|&s| {
            let mut sum = DVector::zeros(r);
            for &(i, _) in cells.iter().filter(|c| c.1 == s) {
                sum += lam.row(i).columns(1, r).transpose();
            }
            // w_t * mean loading at t
            let v = &ing.a_inv * (sum / n);
            (v.transpose() * &ing.gamma[s] * &v)[(0, 0)]
        })
        .sum()
}

fn finish(
    series: &EventSeries,
    terms: Vec<VarianceTerms>,
    d: f64,
    level: f64,
    sigma_e2: f64,
    sigma_e2_t: Vec<f64>,
    gamma_hat: Vec<Matrix>,
    phi_hat: Vec<Matrix>,
) -> Result<InferenceResult> {
    let z = normal_critical(level)?;
    let se: Vec<f64> = terms.iter().map(|v| v.total().max(0.0).sqrt()).collect();
    let variance = terms.iter().map(|v| d * d * v.total().max(0.0)).collect();
    let ci_lower = series.estimate.iter().zip(&se).map(|(e, s)| e - z * s).collect();
    let ci_upper = series.estimate.iter().zip(&se).map(|(e, s)| e + z * s).collect();

    let periods = series.estimate.len();
    let average = if periods == 0 {
        TimeAverage {
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            periods,
        }
    } else {
        let est = series.estimate.iter().sum::<f64>() / periods as f64;
        let s = se.iter().sum::<f64>() / periods as f64;
        TimeAverage {
            estimate: est,
            se: s,
            ci_lower: est - z * s,
            ci_upper: est + z * s,
            periods,
        }
    };
    Ok(InferenceResult {
        event_time: series.event_time.clone(),
        estimate: series.estimate.clone(),
        n_units: series.n_units.clone(),
        variance,
        se,
        terms,
        ci_lower,
        ci_upper,
        level,
        delta: d,
        sigma_e2,
        sigma_e2_t,
        gamma_hat,
        phi_hat,
        average,
    })
}

/// Cells `(unit, calendar row)` behind event time `s` of a series.
fn cells_at(bundle: &EffectsBundle, members: &[usize], s: usize) -> Vec<(usize, usize)> {
    let t = bundle.theta_it.nrows();
    members
        .iter()
        .filter_map(|&i| {
            let row = bundle.t0[i] + s;
            (row < t && bundle.theta_it[(row, i)].is_finite()).then_some((i, row))
        })
        .collect()
}

/// Variance and confidence band of the event-time ATT.
///
/// `V = delta^2 [ Lbar' A^-1 Gamma_t A^-1 Lbar / N0 + sigma_e^2 / N1(s) ]`
/// where `A = Lambda0' Lambda0 / N0` uses the control loadings and `Lbar`
/// averages the treated loadings observed at event time `s`.
pub fn att_inference(
    bundle: &EffectsBundle,
    imputed: &ImputedPanel,
    blocks: &BlockDecomposition,
    opts: &InferenceOptions,
) -> Result<InferenceResult> {
    let ing = ingredients(blocks, imputed, opts.covariance)?;
    let n0 = blocks.n0() as f64;
    let terms = bundle
        .theta_t
        .event_time
        .iter()
        .map(|&s| {
            let cells = cells_at(bundle, &bundle.treated_units, s);
            VarianceTerms {
                factor: 0.0,
                loading: loading_term(&ing, imputed, &cells) / n0,
                error: ing.sigma_e2 / cells.len() as f64,
            }
        })
        .collect();
    let sigma_e2_t = sigma_e2_by_row(&ing.e, &[]);
    finish(
        &bundle.theta_t,
        terms,
        bundle.delta,
        opts.level,
        ing.sigma_e2,
        sigma_e2_t,
        ing.gamma,
        Vec::new(),
    )
}

/// Mean squared residual per calendar row over all units not in `exclude`.
fn sigma_e2_by_row(e: &Matrix, exclude: &[usize]) -> Vec<f64> {
    (0..e.nrows())
        .map(|s| {
            let (sum, count) = (0..e.ncols())
                .filter(|i| !exclude.contains(i))
                .map(|i| e[(s, i)])
                .filter(|v| v.is_finite())
                .fold((0.0, 0usize), |(a, c), v| (a + v * v, c + 1));
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Per-unit loading-regression sandwich `A_i^-1 Phi_i A_i^-1 / T0_i` with
/// `A_i = F~'F~ / T0_i` over the unit's usable pre-treatment rows.
fn unit_sandwich(
    e: &Matrix,
    factors: &Matrix,
    unit: usize,
    t0: usize,
    covariance: CovarianceEstimator,
) -> (Matrix, Matrix) {
    let r = factors.ncols();
    let rows: Vec<usize> = (0..t0)
        .filter(|&s| e[(s, unit)].is_finite() && factors.row(s).iter().all(|v| v.is_finite()))
        .collect();
    let m = rows.len().max(1) as f64;
    let f_tilde = |s: usize| {
        let mut v = DVector::from_element(r + 1, 1.0);
        for k in 0..r {
            v[k + 1] = factors[(s, k)];
        }
        v
    };
    let pooled = rows.iter().map(|&s| e[(s, unit)].powi(2)).sum::<f64>() / m;
    let mut a = Matrix::zeros(r + 1, r + 1);
    let mut phi = Matrix::zeros(r + 1, r + 1);
    for &s in &rows {
        let f = f_tilde(s);
        let outer = &f * f.transpose();
        let w = match covariance {
            CovarianceEstimator::Heteroskedastic => e[(s, unit)].powi(2),
            CovarianceEstimator::Homoskedastic => pooled,
        };
        phi += &outer * w;
        a += outer;
    }
    a /= m;
    phi /= m;
    let a_inv = sym_inverse(&a);
    let sandwich = &a_inv * &phi * &a_inv / m;
    (phi, sandwich)
}

/// Variance and confidence band of a group's event-time effects, plus the
/// time-averaged group effect.
///
/// Adds the loading-estimation (F-) term built from each member's
/// pre-period sandwich; the error term uses the per-row residual variance
/// over units outside the group.
pub fn group_inference(
    bundle: &EffectsBundle,
    imputed: &ImputedPanel,
    blocks: &BlockDecomposition,
    group: &str,
    opts: &InferenceOptions,
) -> Result<InferenceResult> {
    let g = bundle
        .group(group)
        .ok_or_else(|| Error::Config(format!("unknown group '{group}'")))?;
    if g.members.is_empty() {
        return Err(Error::EmptyGroup(g.name.clone()));
    }
    let ing = ingredients(blocks, imputed, opts.covariance)?;
    let factors = &imputed.factor_model.factors;
    let r = ing.r;
    let n0 = blocks.n0() as f64;

    let sandwiches: Vec<(Matrix, Matrix)> = g
        .members
        .iter()
        .map(|&i| unit_sandwich(&ing.e, factors, i, blocks.t0[i], opts.covariance))
        .collect();
    let sigma_e2_t = sigma_e2_by_row(&ing.e, &g.members);

    let terms = g
        .series
        .event_time
        .iter()
        .map(|&s| {
            let cells = cells_at(bundle, &g.members, s);
            let nj = cells.len() as f64;
            let mut f_term = 0.0;
            let mut e_term = 0.0;
            for &(i, row) in &cells {
                let k = g.members.iter().position(|&m| m == i).expect("member");
                let mut f = DVector::from_element(r + 1, 1.0);
                for c in 0..r {
                    f[c + 1] = factors[(row, c)];
                }
                f_term += (f.transpose() * &sandwiches[k].1 * &f)[(0, 0)];
                e_term += sigma_e2_t[row];
            }
            let scale = match opts.group_scaling {
                GroupErrorScaling::GroupMean => nj * nj,
                GroupErrorScaling::AsPrinted => nj,
            };
            VarianceTerms {
                factor: f_term / scale,
                loading: loading_term(&ing, imputed, &cells) / n0,
                error: e_term / scale,
            }
        })
        .collect();
    finish(
        &g.series,
        terms,
        delta(blocks.n0(), g.members.len()),
        opts.level,
        ing.sigma_e2,
        sigma_e2_t,
        ing.gamma,
        sandwiches.into_iter().map(|p| p.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ife::{fit_ife, IfeOptions};
    use crate::impute::impute_counterfactuals;
    use crate::panel::{decompose_blocks, Covariate};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    struct Sim {
        dataset: PanelDataset,
        blocks: BlockDecomposition,
        imputed: ImputedPanel,
    }

    fn simulate(seed: u64, noise: f64, theta: f64, shift_x: f64) -> Sim {
        let (t, n, n0, r) = (40, 24, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Matrix::from_fn(t, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lam = Matrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = Matrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let adoption: Vec<Option<usize>> = (0..n)
            .map(|i| if i < n0 { None } else { Some(22 + (i % 3)) })
            .collect();
        let y = Matrix::from_fn(t, n, |s, i| {
            let treated = adoption[i].is_some_and(|a| s >= a);
            0.7 * x[(s, i)]
                + (f.row(s) * lam.row(i).transpose())[(0, 0)]
                + 0.3 * i as f64
                + noise * rng.sample::<f64, _>(StandardNormal)
                + if treated { theta } else { 0.0 }
        });
        let d0 = NaiveDate::from_ymd_opt(2020, 2, 20).unwrap();
        let dates = (0..t).map(|s| d0 + chrono::Days::new(s as u64)).collect();
        let units = (0..n).map(|i| format!("u{i}")).collect();
        let xs = x.map(|v| v + shift_x);
        let dataset =
            PanelDataset::from_adoption(units, dates, y, &adoption, vec![Covariate::new("x", xs)], vec![])
                .unwrap();
        let blocks = decompose_blocks(&dataset, false).unwrap();
        let y0 = crate::linalg::select_cols(dataset.y(), &blocks.control_units);
        let x0 = crate::linalg::select_cols(&dataset.x()[0].values, &blocks.control_units);
        let fit = fit_ife(&y0, &[Covariate::new("x", x0)], &[], r, &IfeOptions::default()).unwrap();
        let imputed = impute_counterfactuals(&dataset, &blocks, &fit, r).unwrap();
        Sim {
            dataset,
            blocks,
            imputed,
        }
    }

    fn treated_names(sim: &Sim) -> Vec<String> {
        sim.blocks
            .treated_units
            .iter()
            .map(|&i| sim.dataset.units()[i].clone())
            .collect()
    }

    #[test]
    fn delta_matches_min_root() {
        assert_eq!(delta(16, 39), 4.0);
        assert!((delta(24, 31) - 24f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn critical_values() {
        assert!((normal_critical(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(normal_critical(1.0).is_err());
        assert!(normal_critical(0.0).is_err());
    }

    #[test]
    fn noiseless_effects_are_exact_and_bands_collapse() {
        let sim = simulate(1, 0.0, -0.098, 0.0);
        let groups = [Group::new("all", treated_names(&sim))];
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
        for v in &b.theta_t.estimate {
            assert!((v + 0.098).abs() < 1e-6, "{v}");
        }
        let att = att_inference(&b, &sim.imputed, &sim.blocks, &InferenceOptions::default()).unwrap();
        let grp = group_inference(&b, &sim.imputed, &sim.blocks, "all", &InferenceOptions::default()).unwrap();
        for res in [&att, &grp] {
            for (lo, hi) in res.ci_lower.iter().zip(&res.ci_upper) {
                assert!(hi - lo < 1e-6, "{lo} {hi}");
            }
        }
    }

    #[test]
    fn att_matches_manual_mean_over_event_time() {
        let sim = simulate(2, 0.1, -0.2, 0.0);
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &[]).unwrap();
        let s = 3;
        let k = b.theta_t.event_time.iter().position(|&e| e == s).unwrap();
        let vals: Vec<f64> = sim
            .blocks
            .treated_units
            .iter()
            .map(|&i| {
                let row = sim.blocks.t0[i] + s;
                sim.dataset.y()[(row, i)] - sim.imputed.y0_hat[(row, i)]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((b.theta_t.estimate[k] - mean).abs() < 1e-14);
        assert_eq!(b.theta_t.n_units[k], vals.len());
    }

    #[test]
    fn group_of_all_treated_equals_att() {
        let sim = simulate(3, 0.1, -0.1, 0.0);
        let groups = [Group::new("all", treated_names(&sim))];
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
        assert_eq!(b.groups[0].series, b.theta_t);

        let opts = InferenceOptions::default();
        let att = att_inference(&b, &sim.imputed, &sim.blocks, &opts).unwrap();
        let grp = group_inference(&b, &sim.imputed, &sim.blocks, "all", &opts).unwrap();
        for (a, g) in att.terms.iter().zip(&grp.terms) {
            assert!((a.loading - g.loading).abs() < 1e-15);
            assert_eq!(a.factor, 0.0);
            assert!(g.factor > 0.0);
        }
    }

    #[test]
    fn singleton_group_is_the_unit_effect() {
        let sim = simulate(4, 0.1, -0.1, 0.0);
        let name = treated_names(&sim)[2].clone();
        let i = sim.dataset.unit_index(&name).unwrap();
        let groups = [Group::new("one", [name])];
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
        let g = &b.groups[0].series;
        for (s, v) in g.event_time.iter().zip(&g.estimate) {
            assert_eq!(*v, b.theta_it[(sim.blocks.t0[i] + s, i)]);
        }
    }

    #[test]
    fn partition_weighted_mean_is_att() {
        let sim = simulate(5, 0.1, -0.1, 0.0);
        let names = treated_names(&sim);
        let groups = [
            Group::new("a", names[..5].to_vec()),
            Group::new("b", names[5..].to_vec()),
        ];
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
        for (k, s) in b.theta_t.event_time.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0usize);
            for g in &b.groups {
                if let Some(p) = g.series.event_time.iter().position(|e| e == s) {
                    num += g.series.estimate[p] * g.series.n_units[p] as f64;
                    den += g.series.n_units[p];
                }
            }
            assert_eq!(den, b.theta_t.n_units[k]);
            assert!((num / den as f64 - b.theta_t.estimate[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn covariate_shift_leaves_effects_unchanged() {
        let a = simulate(6, 0.1, -0.1, 0.0);
        let b = simulate(6, 0.1, -0.1, 123.0);
        let ea = compute_effects(&a.dataset, &a.blocks, &a.imputed, &[]).unwrap();
        let eb = compute_effects(&b.dataset, &b.blocks, &b.imputed, &[]).unwrap();
        for (x, y) in ea.theta_t.estimate.iter().zip(&eb.theta_t.estimate) {
            assert!((x - y).abs() < 1e-8, "{x} {y}");
        }
    }

    #[test]
    fn empty_and_invalid_groups_are_rejected() {
        let sim = simulate(7, 0.1, 0.0, 0.0);
        let err = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &[Group::new("none", Vec::<String>::new())])
            .unwrap_err();
        assert!(matches!(err, Error::EmptyGroup(ref g) if g == "none"));
        let err = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &[Group::new("ctl", ["u0"])]).unwrap_err();
        assert!(matches!(err, Error::GroupMemberNotTreated { ref unit, .. } if unit == "u0"));
        let err = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &[Group::new("x", ["nope"])]).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn as_printed_scaling_is_wider() {
        let sim = simulate(8, 0.1, 0.0, 0.0);
        let groups = [Group::new("g", treated_names(&sim)[..6].to_vec())];
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
        let mean = group_inference(&b, &sim.imputed, &sim.blocks, "g", &InferenceOptions::default()).unwrap();
        let printed = InferenceOptions {
            group_scaling: GroupErrorScaling::AsPrinted,
            ..Default::default()
        };
        let printed = group_inference(&b, &sim.imputed, &sim.blocks, "g", &printed).unwrap();
        for ((m, p), n) in mean.terms.iter().zip(&printed.terms).zip(&mean.n_units) {
            assert!((p.error - m.error * *n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_e2_uses_dof_divisor() {
        let sim = simulate(9, 0.2, 0.0, 0.0);
        let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &[]).unwrap();
        let res = att_inference(&b, &sim.imputed, &sim.blocks, &InferenceOptions::default()).unwrap();
        let e = sim.imputed.idiosyncratic(&sim.blocks);
        let ssr: f64 = (0..40)
            .flat_map(|s| (0..10).map(move |i| (s, i)))
            .map(|c| e[c].powi(2))
            .sum();
        // T*N0 - r(T+N0) + r^2 - K = 400 - 100 + 4 - 1
        assert!((res.sigma_e2 - ssr / 303.0).abs() < 1e-14);
        assert!(res.sigma_e2 > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn wider_level_contains_narrower(seed in 0u64..1000, noise in 0.01f64..0.5) {
            let sim = simulate(seed, noise, -0.05, 0.0);
            let names = treated_names(&sim);
            let groups = [Group::new("g", names[..7].to_vec())];
            let b = compute_effects(&sim.dataset, &sim.blocks, &sim.imputed, &groups).unwrap();
            for gname in [None, Some("g")] {
                let run = |level: f64| {
                    let o = InferenceOptions::with_level(level);
                    match gname {
                        None => att_inference(&b, &sim.imputed, &sim.blocks, &o).unwrap(),
                        Some(g) => group_inference(&b, &sim.imputed, &sim.blocks, g, &o).unwrap(),
                    }
                };
                let (r95, r99) = (run(0.95), run(0.99));
                for k in 0..r95.estimate.len() {
                    prop_assert!(r99.ci_lower[k] <= r95.ci_lower[k]);
                    prop_assert!(r99.ci_upper[k] >= r95.ci_upper[k]);
                    prop_assert!(r95.variance[k] >= 0.0);
                    prop_assert!(r95.ci_lower[k] <= r95.estimate[k] && r95.estimate[k] <= r95.ci_upper[k]);
                }
            }
        }
    }
}
