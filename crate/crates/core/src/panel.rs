//! Panel data model: outcome transforms, covariate lags, block structure of
//! the untreated-outcome matrix and the order-condition checks that decide
//! whether a factor model of a given size is identifiable on it.
//!
//! Matrices are stored `T x N` (rows are days, columns are units). Missing
//! cells are `NaN`.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// A named `T x N` covariate slice. `NaN` marks cells with no value
/// (e.g. the leading rows of a lagged series).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: Matrix,
}

impl Covariate {
    pub fn new(name: impl Into<String>, values: Matrix) -> Self {
        Covariate {
            name: name.into(),
            values,
        }
    }
}

/// Balanced `T x N` panel with absorbing treatment.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    units: Vec<String>,
    dates: Vec<NaiveDate>,
    y: Matrix,
    d: DMatrix<u8>,
    x: Vec<Covariate>,
    z: Vec<Covariate>,
    t0: Vec<usize>,
}

impl PanelDataset {
    /// Builds a panel from an explicit treatment indicator matrix.
    ///
    /// `x` holds the (already lagged) behavioural covariates and `z` the
    /// contemporaneous confounders.
    pub fn new(
        units: Vec<String>,
        dates: Vec<NaiveDate>,
        y: Matrix,
        d: DMatrix<u8>,
        x: Vec<Covariate>,
        z: Vec<Covariate>,
    ) -> Result<Self> {
        let (t, n) = y.shape();
        if units.len() != n {
            return Err(Error::Dimension(format!(
                "{} unit labels for {} outcome columns",
                units.len(),
                n
            )));
        }
        if dates.len() != t {
            return Err(Error::Dimension(format!(
                "{} dates for {} outcome rows",
                dates.len(),
                t
            )));
        }
        if d.shape() != (t, n) {
            return Err(Error::Dimension(format!(
                "treatment matrix is {:?}, outcome is {:?}",
                d.shape(),
                (t, n)
            )));
        }
        for c in x.iter().chain(z.iter()) {
            if c.values.shape() != (t, n) {
                return Err(Error::Dimension(format!(
                    "covariate '{}' is {:?}, outcome is {:?}",
                    c.name,
                    c.values.shape(),
                    (t, n)
                )));
            }
        }
        let mut t0 = Vec::with_capacity(n);
        for i in 0..n {
            let lead = (0..t).take_while(|&s| d[(s, i)] == 0).count();
            if let Some(row) = (lead..t).find(|&s| d[(s, i)] == 0) {
                return Err(Error::NonAbsorbingTreatment {
                    unit: units[i].clone(),
                    row,
                });
            }
            if let Some(row) = (0..t).find(|&s| d[(s, i)] > 1) {
                return Err(Error::Dimension(format!(
                    "treatment indicator for '{}' at row {} is not 0/1",
                    units[i], row
                )));
            }
            t0.push(lead);
        }
        Ok(PanelDataset {
            units,
            dates,
            y,
            d,
            x,
            z,
            t0,
        })
    }

    /// Builds a panel from per-unit adoption rows (`None` = never treated
    /// inside the window). Adoption at row `s` means `D = 1` from `s` on.
    pub fn from_adoption(
        units: Vec<String>,
        dates: Vec<NaiveDate>,
        y: Matrix,
        adoption: &[Option<usize>],
        x: Vec<Covariate>,
        z: Vec<Covariate>,
    ) -> Result<Self> {
        let (t, n) = y.shape();
        if adoption.len() != n {
            return Err(Error::Dimension(format!(
                "{} adoption entries for {} units",
                adoption.len(),
                n
            )));
        }
        let d = DMatrix::from_fn(t, n, |s, i| match adoption[i] {
            Some(a) if s >= a => 1u8,
            _ => 0u8,
        });
        Self::new(units, dates, y, d, x, z)
    }

    pub fn n_units(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_periods(&self) -> usize {
        self.y.nrows()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn d(&self) -> &DMatrix<u8> {
        &self.d
    }

    pub fn x(&self) -> &[Covariate] {
        &self.x
    }

    pub fn z(&self) -> &[Covariate] {
        &self.z
    }

    /// Per-unit pre-treatment length `T_{0,i}` (equals `T` for controls).
    pub fn t0(&self) -> &[usize] {
        &self.t0
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.t0[unit] < self.n_periods()
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u == name)
    }

    /// Number of slope coefficients, `dim(beta) + dim(gamma)`.
    pub fn covariate_count(&self) -> usize {
        self.x.len() + self.z.len()
    }

    /// All covariates, lagged block first.
    pub fn covariates(&self) -> impl Iterator<Item = &Covariate> {
        self.x.iter().chain(self.z.iter())
    }

    /// True when the outcome and every covariate are finite at `(t, i)`.
    pub fn cell_complete(&self, t: usize, i: usize) -> bool {
        self.y[(t, i)].is_finite() && self.covariates().all(|c| c.values[(t, i)].is_finite())
    }
}

/// Weekly log-growth of daily new counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSeries {
    pub values: Vec<Option<f64>>,
    /// First index at which the lagged increment exists.
    pub valid_from: usize,
}

/// `log(dC_t) - log(dC_{t-window})` with `dC_t = C_t - C_{t-1}`.
///
/// Days whose increment (or lagged increment) is not strictly positive are
/// left missing. `NaN` inputs are treated as unknown cumulative values.
pub fn compute_growth_rate(cumulative: &[f64], window: usize) -> Result<GrowthSeries> {
    if window == 0 || cumulative.len() < window + 1 {
        return Err(Error::SeriesTooShort {
            len: cumulative.len(),
            window,
        });
    }
    let mut last: Option<f64> = None;
    for (index, &c) in cumulative.iter().enumerate() {
        if !c.is_finite() {
            continue;
        }
        if let Some(prev) = last {
            if c < prev {
                return Err(Error::DecreasingCumulative {
                    index,
                    previous: prev,
                    current: c,
                });
            }
        }
        last = Some(c);
    }

    let increment = |t: usize| -> Option<f64> {
        let (a, b) = (cumulative[t], cumulative[t - 1]);
        let d = a - b;
        (a.is_finite() && b.is_finite() && d > 0.0).then_some(d)
    };
    let valid_from = window + 1;
    let values = (0..cumulative.len())
        .map(|t| {
            if t < valid_from {
                return None;
            }
            let now = increment(t)?;
            let then = increment(t - window)?;
            Some(now.ln() - then.ln())
        })
        .collect();
    Ok(GrowthSeries { values, valid_from })
}

/// A lagged covariate: row `t` holds raw row `t - lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDesign {
    pub values: Matrix,
    /// `true` for rows with no source row (the first `lag` rows).
    pub masked: Vec<bool>,
}

pub fn build_lagged_design(raw: &Matrix, lag: usize) -> Result<LaggedDesign> {
    let rows = raw.nrows();
    if lag >= rows {
        return Err(Error::EmptyDesign { lag, rows });
    }
    let values = Matrix::from_fn(rows, raw.ncols(), |t, i| {
        if t < lag {
            f64::NAN
        } else {
            raw[(t - lag, i)]
        }
    });
    let masked = (0..rows).map(|t| t < lag).collect();
    Ok(LaggedDesign { values, masked })
}

/// Index sets of the untreated-outcome matrix.
///
/// * BAL: controls x first `t0_common` rows
/// * TALL: controls x all rows
/// * WIDE: all units x first `t0_common` rows
/// * MISS: treated units from their own adoption row on
/// * staggered pre-period: treated units between `t0_common` and their own
///   adoption row. These cells are observed untreated outcomes that belong
///   to none of the other blocks when adoption is staggered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDecomposition {
    pub n_periods: usize,
    pub n_units: usize,
    pub control_units: Vec<usize>,
    pub treated_units: Vec<usize>,
    pub t0: Vec<usize>,
    pub t0_common: usize,
}

pub type Cell = (usize, usize);

impl BlockDecomposition {
    pub fn n0(&self) -> usize {
        self.control_units.len()
    }

    pub fn n1(&self) -> usize {
        self.treated_units.len()
    }

    /// Controls first, then treated units, each in original order.
    pub fn unit_order(&self) -> Vec<usize> {
        self.control_units
            .iter()
            .chain(self.treated_units.iter())
            .copied()
            .collect()
    }

    pub fn is_miss(&self, t: usize, i: usize) -> bool {
        t >= self.t0[i]
    }

    pub fn bal_cells(&self) -> Vec<Cell> {
        cells(0..self.t0_common, &self.control_units)
    }

    pub fn tall_cells(&self) -> Vec<Cell> {
        cells(0..self.n_periods, &self.control_units)
    }

    pub fn wide_cells(&self) -> Vec<Cell> {
        cells(0..self.t0_common, &self.unit_order())
    }

    pub fn miss_cells(&self) -> Vec<Cell> {
        self.treated_units
            .iter()
            .flat_map(|&i| (self.t0[i]..self.n_periods).map(move |t| (t, i)))
            .collect()
    }

    pub fn staggered_pre_cells(&self) -> Vec<Cell> {
        self.treated_units
            .iter()
            .flat_map(|&i| (self.t0_common..self.t0[i]).map(move |t| (t, i)))
            .collect()
    }
}

fn cells(rows: std::ops::Range<usize>, units: &[usize]) -> Vec<Cell> {
    rows.flat_map(|t| units.iter().map(move |&i| (t, i)))
        .collect()
}

/// Splits the panel into control and treated units and their blocks.
///
/// With no treated units the call fails unless `allow_all_control` is set,
/// in which case MISS is empty and `t0_common = T`.
pub fn decompose_blocks(dataset: &PanelDataset, allow_all_control: bool) -> Result<BlockDecomposition> {
    let t = dataset.n_periods();
    let (treated_units, control_units): (Vec<usize>, Vec<usize>) =
        (0..dataset.n_units()).partition(|&i| dataset.is_treated(i));
    if control_units.is_empty() {
        return Err(Error::NoControlGroup);
    }
    if treated_units.is_empty() && !allow_all_control {
        return Err(Error::NoTreatedUnits);
    }
    let t0_common = treated_units
        .iter()
        .map(|&i| dataset.t0()[i])
        .min()
        .unwrap_or(t);
    Ok(BlockDecomposition {
        n_periods: t,
        n_units: dataset.n_units(),
        control_units,
        treated_units,
        t0: dataset.t0().to_vec(),
        t0_common,
    })
}

/// One side of an order condition, `lhs > rhs` required.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderCondition {
    pub lhs: usize,
    pub rhs: usize,
}

impl OrderCondition {
    pub fn holds(&self) -> bool {
        self.lhs > self.rhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidityReport {
    pub r: usize,
    pub k: usize,
    /// `T*N0 > r(T+N0)`
    pub tall: OrderCondition,
    /// `N*T0 > r(N+T0)`
    pub wide: OrderCondition,
    /// `sqrt(N) / min(N0, T0)`
    pub sqrt_n_ratio: f64,
    /// `sqrt(T) / min(N0, T0)`
    pub sqrt_t_ratio: f64,
    /// Residual degrees of freedom `T*N0 - r(T+N0) + r^2 - K`.
    pub dof: i64,
    pub warnings: Vec<String>,
}

pub fn validate_assumptions(blocks: &BlockDecomposition, r: usize, k: usize) -> Result<ValidityReport> {
    let t = blocks.n_periods;
    let n = blocks.n_units;
    let n0 = blocks.n0();
    let t0 = blocks.t0_common;

    let tall = OrderCondition {
        lhs: t * n0,
        rhs: r * (t + n0),
    };
    let wide = OrderCondition {
        lhs: n * t0,
        rhs: r * (n + t0),
    };
    if !tall.holds() {
        return Err(Error::OrderCondition(format!(
            "T*N0 > r(T+N0) fails on the TALL block: {}*{} = {} <= {}*({}+{}) = {}",
            t, n0, tall.lhs, r, t, n0, tall.rhs
        )));
    }
    if !wide.holds() {
        return Err(Error::OrderCondition(format!(
            "N*T0 > r(N+T0) fails on the WIDE block: {}*{} = {} <= {}*({}+{}) = {}",
            n, t0, wide.lhs, r, n, t0, wide.rhs
        )));
    }

    let m = n0.min(t0) as f64;
    let sqrt_n_ratio = (n as f64).sqrt() / m;
    let sqrt_t_ratio = (t as f64).sqrt() / m;
    let dof = residual_dof(t, n0, r, k);

    let mut warnings = Vec::new();
    if sqrt_n_ratio > 1.0 {
        warnings.push(format!("sqrt(N)/min(N0,T0) = {sqrt_n_ratio:.3} exceeds 1"));
    }
    if sqrt_t_ratio > 1.0 {
        warnings.push(format!("sqrt(T)/min(N0,T0) = {sqrt_t_ratio:.3} exceeds 1"));
    }
    if dof <= 0 {
        warnings.push(format!("residual degrees of freedom {dof} <= 0; inference unavailable"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ValidityReport {
        r,
        k,
        tall,
        wide,
        sqrt_n_ratio,
        sqrt_t_ratio,
        dof,
        warnings,
    })
}

/// `T*N0 - r(T+N0) + r^2 - K`
pub fn residual_dof(t: usize, n0: usize, r: usize, k: usize) -> i64 {
    let (t, n0, r, k) = (t as i64, n0 as i64, r as i64, k as i64);
    t * n0 - r * (t + n0) + r * r - k
}
