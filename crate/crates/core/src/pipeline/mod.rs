//! Configuration, orchestration, Monte Carlo studies and export.

mod dgp;
mod export;
mod io;
mod montecarlo;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::effects::{
    att_inference, compute_effects, group_inference, CovarianceEstimator, EffectsBundle, Group,
    GroupErrorScaling, InferenceOptions, InferenceResult, TimeAverage,
};
use crate::error::{Error, Result, Stage};
use crate::factor::{default_r_max, select_r, IcPenalty};
use crate::ife::{fit_ife, residualize, IfeOptions};
use crate::impute::{impute_counterfactuals, ImputedPanel};
use crate::linalg::{demean_columns, select_cols, select_rows};
use crate::panel::{decompose_blocks, validate_assumptions, BlockDecomposition, Covariate, PanelDataset, ValidityReport};
pub use crate::seir::Outcome;

pub use dgp::{LinearFactorDgp, SyntheticPanel};
pub use export::{export_results, export_simulation, format_number, ExportFormat};
pub use io::{load_panel, timeline_dataset, InputDigest, LoadedPanel, NamedSource, PanelInputs, PolicyTimeline, BUNDLED_TIMELINE};
pub use montecarlo::{replication_seed, run_monte_carlo, Dgp, McConfig, McReport, MetricSummary, SeirDgp};

/// Which policy date defines treatment onset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateKind {
    #[default]
    Announced,
    Effective,
}

impl DateKind {
    pub fn suffix(self) -> &'static str {
        match self {
            DateKind::Announced => "announced",
            DateKind::Effective => "effective",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub outcome: Outcome,
    /// Covariate lag in days; `None` means 14 for cases, 21 for deaths.
    pub lag_m: Option<usize>,
    /// Policy column (`stay_home`, `business_closure`, or any column name).
    pub policy: String,
    pub date_kind: DateKind,
    pub start: NaiveDate,
    /// Last day of the window (inclusive).
    pub end: NaiveDate,
    pub growth_window: usize,
    /// Factor count; `None` selects it by information criterion.
    pub r: Option<usize>,
    pub r_max: Option<usize>,
    pub ic_penalty: IcPenalty,
    pub ci_level: f64,
    pub groups: Vec<Group>,
    pub seed: u64,
    pub ife: IfeOptions,
    pub covariance: CovarianceEstimator,
    pub group_scaling: GroupErrorScaling,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            outcome: Outcome::Cases,
            lag_m: None,
            policy: "stay_home".into(),
            date_kind: DateKind::Announced,
            start: NaiveDate::from_ymd_opt(2020, 2, 20).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2020, 4, 20).expect("valid date"),
            growth_window: 7,
            r: None,
            r_max: None,
            ic_penalty: IcPenalty::default(),
            ci_level: 0.95,
            groups: Vec::new(),
            seed: 0,
            ife: IfeOptions::default(),
            covariance: CovarianceEstimator::default(),
            group_scaling: GroupErrorScaling::default(),
        }
    }
}

impl RunConfig {
    pub fn lag(&self) -> usize {
        self.lag_m.unwrap_or(match self.outcome {
            Outcome::Cases => 14,
            Outcome::Deaths => 21,
        })
    }

    pub fn window_days(&self) -> usize {
        ((self.end - self.start).num_days() + 1).max(0) as usize
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            level: self.ci_level,
            covariance: self.covariance,
            group_scaling: self.group_scaling,
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::Config(format!(
                "window start {} is not before end {}",
                self.start, self.end
            )));
        }
        let t = self.window_days();
        if self.lag() >= t {
            return Err(Error::Config(format!(
                "lag_m = {} must be smaller than the window length T = {t}",
                self.lag()
            )));
        }
        if self.growth_window == 0 {
            return Err(Error::Config("growth window must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level {} is not in (0, 1)", self.ci_level)));
        }
        if !(self.ife.tol > 0.0) || self.ife.max_iter == 0 {
            return Err(Error::Config("IFE tolerance and iteration cap must be positive".into()));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if g.name.is_empty() || !g.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "group name '{}' must be non-empty ASCII letters, digits, '_' or '-'",
                    g.name
                )));
            }
            if self.groups[..k].iter().any(|h| h.name == g.name) {
                return Err(Error::Config(format!("group '{}' is defined twice", g.name)));
            }
        }
        Ok(())
    }

    /// Rejects groups that name units absent from the panel.
    pub fn check_groups(&self, units: &[String]) -> Result<()> {
        for g in &self.groups {
            if g.units.is_empty() {
                return Err(Error::EmptyGroup(g.name.clone()));
            }
            if let Some(u) = g.units.iter().find(|u| !units.contains(u)) {
                return Err(Error::Config(format!("group '{}' references unknown unit '{u}'", g.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// One row of an effect table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectRow {
    pub event_time: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    pub average: TimeAverage,
}

impl EffectTable {
    fn from_inference(res: &InferenceResult) -> Self {
        let rows = (0..res.estimate.len())
            .map(|k| EffectRow {
                event_time: res.event_time[k],
                estimate: res.estimate[k],
                se: res.se[k],
                ci_lo: res.ci_lower[k],
                ci_hi: res.ci_upper[k],
                n_units: res.n_units[k],
            })
            .collect();
        EffectTable {
            rows,
            average: res.average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupTable {
    pub name: String,
    pub units: Vec<String>,
    pub table: EffectTable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub t: usize,
    pub n0: usize,
    pub n1: usize,
    pub t0_common: usize,
    pub r: usize,
    /// `Some` when r was selected by information criterion.
    pub r_tall: Option<usize>,
    pub r_wide: Option<usize>,
    pub coefficients: Vec<(String, f64)>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub sigma_e2: f64,
    pub delta: f64,
    pub validity: ValidityReport,
    pub singular_units: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsBundle {
    pub att: EffectTable,
    pub groups: Vec<GroupTable>,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
}

impl ResultsBundle {
    pub fn with_inputs(mut self, inputs: Vec<InputDigest>) -> Self {
        self.provenance.inputs = inputs;
        self
    }

    /// SHA-256 of the bundle's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("bundle serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Intermediate objects of one estimation run.
#[derive(Debug, Clone)]
pub struct Estimation {
    pub blocks: BlockDecomposition,
    pub imputed: ImputedPanel,
    pub effects: EffectsBundle,
    pub att: InferenceResult,
    pub groups: Vec<InferenceResult>,
    pub bundle: ResultsBundle,
}

fn control_covariates(cs: &[Covariate], cols: &[usize]) -> Vec<Covariate> {
    cs.iter()
        .map(|c| Covariate::new(c.name.clone(), select_cols(&c.values, cols)))
        .collect()
}

fn complete_rows(m: &crate::panel::Matrix) -> Vec<usize> {
    (0..m.nrows())
        .filter(|&s| m.row(s).iter().all(|v| v.is_finite()))
        .collect()
}

/// Factor count from the factorless fit's residuals on the TALL and WIDE
/// blocks.
fn choose_r(
    dataset: &PanelDataset,
    blocks: &BlockDecomposition,
    config: &RunConfig,
    x0: &[Covariate],
    z0: &[Covariate],
    y0: &crate::panel::Matrix,
) -> Result<(usize, Option<usize>, Option<usize>)> {
    if let Some(r) = config.r {
        return Ok((r, None, None));
    }
    let base = fit_ife(y0, x0, z0, 0, &config.ife)?;
    let resid = residualize(dataset.y(), dataset.x(), dataset.z(), &base.beta, &base.gamma)?;

    let tall = select_cols(&resid, &blocks.control_units);
    let tall = select_rows(&tall, &complete_rows(&tall));
    let wide_rows: Vec<usize> = (0..blocks.t0_common).collect();
    let wide = select_rows(&resid, &wide_rows);
    let wide = select_rows(&wide, &complete_rows(&wide));
    if tall.nrows() < 2 || wide.nrows() < 2 {
        return Err(Error::NoCompleteRows);
    }
    let cap = default_r_max(blocks.t0_common, blocks.n0());
    let r_max = config.r_max.unwrap_or(cap);
    let count = select_r(&demean_columns(&tall).0, &demean_columns(&wide).0, r_max, config.ic_penalty);
    Ok((count.r, Some(count.r_tall), Some(count.r_wide)))
}

/// Runs blocks -> factor count -> validity -> IFE fit -> imputation ->
/// effects -> inference.
pub fn run_estimation(dataset: &PanelDataset, config: &RunConfig) -> Result<ResultsBundle> {
    estimate_detailed(dataset, config).map(|e| e.bundle)
}

/// Like [`run_estimation`] but keeps the intermediate objects.
pub fn estimate_detailed(dataset: &PanelDataset, config: &RunConfig) -> Result<Estimation> {
    config.validate().map_err(|e| e.in_stage(Stage::Validate))?;
    config
        .check_groups(dataset.units())
        .map_err(|e| e.in_stage(Stage::Validate))?;
    let blocks = decompose_blocks(dataset, false).map_err(|e| e.in_stage(Stage::Blocks))?;

    let y0 = select_cols(dataset.y(), &blocks.control_units);
    let x0 = control_covariates(dataset.x(), &blocks.control_units);
    let z0 = control_covariates(dataset.z(), &blocks.control_units);
    let (r, r_tall, r_wide) =
        choose_r(dataset, &blocks, config, &x0, &z0, &y0).map_err(|e| e.in_stage(Stage::FitIfe))?;
    let k = dataset.covariate_count();
    let validity = validate_assumptions(&blocks, r, k).map_err(|e| e.in_stage(Stage::Validate))?;

    let fit = fit_ife(&y0, &x0, &z0, r, &config.ife).map_err(|e| e.in_stage(Stage::FitIfe))?;
    if !fit.converged {
        log::warn!("IFE fit did not converge in {} iterations", fit.iterations);
    }
    let imputed = impute_counterfactuals(dataset, &blocks, &fit, r).map_err(|e| e.in_stage(Stage::Impute))?;
    let effects =
        compute_effects(dataset, &blocks, &imputed, &config.groups).map_err(|e| e.in_stage(Stage::Effects))?;
    let opts = config.inference_options();
    let att = att_inference(&effects, &imputed, &blocks, &opts).map_err(|e| e.in_stage(Stage::Inference))?;
    let groups: Vec<InferenceResult> = config
        .groups
        .iter()
        .map(|g| group_inference(&effects, &imputed, &blocks, &g.name, &opts))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage(Stage::Inference))?;

    let names = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| dataset.units()[i].clone()).collect() };
    let coefficients = dataset
        .covariates()
        .map(|c| c.name.clone())
        .zip(fit.coefficients())
        .collect();
    let bundle = ResultsBundle {
        att: EffectTable::from_inference(&att),
        groups: config
            .groups
            .iter()
            .zip(&groups)
            .zip(&effects.groups)
            .map(|((g, res), ge)| GroupTable {
                name: g.name.clone(),
                units: names(&ge.members),
                table: EffectTable::from_inference(res),
            })
            .collect(),
        diagnostics: Diagnostics {
            n: blocks.n_units,
            t: blocks.n_periods,
            n0: blocks.n0(),
            n1: blocks.n1(),
            t0_common: blocks.t0_common,
            r,
            r_tall,
            r_wide,
            coefficients,
            converged: fit.converged,
            iterations: fit.iterations,
            objective: fit.objective_path.last().copied().unwrap_or(f64::NAN),
            sigma_e2: att.sigma_e2,
            delta: effects.delta,
            validity,
            singular_units: names(&imputed.singular_units),
        },
        provenance: Provenance {
            config_sha256: config.digest(),
            inputs: Vec::new(),
        },
    };
    Ok(Estimation {
        blocks,
        imputed,
        effects,
        att,
        groups,
        bundle,
    })
}
