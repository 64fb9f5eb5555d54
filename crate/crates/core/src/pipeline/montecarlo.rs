//! Replicated estimation on synthetic panels with known effects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{LinearFactorDgp, SyntheticPanel};
use super::{estimate_detailed, RunConfig};
use crate::effects::Group;
use crate::error::{Error, Result};
use crate::panel::Matrix;
use crate::seir::{simulate_panel, PanelShape, PanelSimConfig};

/// SEIR-based DGP. The untreated outcomes are the same simulation rerun
/// with a policy multiplier of one (identical random streams), so the
/// planted effects are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeirDgp {
    pub shape: PanelShape,
    pub policy_multiplier: f64,
    pub observation_noise: f64,
    pub common_volatility: f64,
    pub unit_volatility: f64,
    /// Simulated days before the observation window.
    pub burn_in: usize,
}

impl Default for SeirDgp {
    fn default() -> Self {
        let base = PanelSimConfig::random(PanelShape::default(), 1.0, 0);
        SeirDgp {
            shape: PanelShape::default(),
            policy_multiplier: 0.7,
            observation_noise: base.observation_noise,
            common_volatility: base.common_volatility,
            unit_volatility: base.unit_volatility,
            burn_in: base.burn_in,
        }
    }
}

impl SeirDgp {
    pub fn generate(&self, seed: u64) -> Result<SyntheticPanel> {
        let mut cfg = PanelSimConfig::random(self.shape, self.policy_multiplier, seed);
        cfg.observation_noise = self.observation_noise;
        cfg.common_volatility = self.common_volatility;
        cfg.unit_volatility = self.unit_volatility;
        cfg.burn_in = self.burn_in;
        let treated = simulate_panel(&cfg, seed)?;
        cfg.policy_multiplier = 1.0;
        let untreated = simulate_panel(&cfg, seed)?;
        let (t, n) = treated.dataset.y().shape();
        let theta_it = Matrix::from_fn(t, n, |s, i| {
            if s >= treated.dataset.t0()[i] {
                treated.dataset.y()[(s, i)] - untreated.dataset.y()[(s, i)]
            } else {
                f64::NAN
            }
        });
        Ok(SyntheticPanel {
            dataset: treated.dataset,
            y0: untreated.dataset.y().clone(),
            theta_it,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dgp {
    LinearFactor(LinearFactorDgp),
    Seir(SeirDgp),
}

impl Dgp {
    fn generate(&self, seed: u64) -> Result<SyntheticPanel> {
        match self {
            Dgp::LinearFactor(d) => d.generate(seed),
            Dgp::Seir(d) => d.generate(seed),
        }
    }

    fn true_coefficients(&self) -> Option<Vec<f64>> {
        match self {
            Dgp::LinearFactor(d) => Some(vec![d.beta, d.gamma]),
            Dgp::Seir(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dgp: Dgp,
    pub replications: usize,
    pub seed: u64,
    /// Estimation settings; its `groups` are replaced by the study group.
    pub estimation: RunConfig,
    /// Size of the study group (the first treated units), if any.
    pub group_size: Option<usize>,
    /// Abort when more than this share of replications fail.
    pub max_failure_rate: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dgp: Dgp::LinearFactor(LinearFactorDgp::default()),
            replications: 500,
            seed: 1,
            estimation: RunConfig::default(),
            group_size: Some(10),
            max_failure_rate: 0.1,
        }
    }
}

/// Bias, RMSE and coverage of an estimator against planted truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    /// Number of (replication, estimate) pairs.
    pub n: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_se: f64,
    pub sd_estimate: f64,
}

#[derive(Debug, Default)]
struct Acc {
    err: Vec<f64>,
    est: Vec<f64>,
    se: Vec<f64>,
    covered: Vec<bool>,
}

impl Acc {
    fn push(&mut self, est: f64, truth: f64, se: f64, lo: f64, hi: f64) {
        self.err.push(est - truth);
        self.est.push(est);
        self.se.push(se);
        self.covered.push(lo <= truth && truth <= hi);
    }

    fn summary(&self) -> MetricSummary {
        let n = self.err.len();
        let nf = n as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        let cov = self.covered.iter().filter(|&&c| c).count() as f64 / nf;
        MetricSummary {
            n,
            bias: mean(&self.err),
            bias_mcse: sd(&self.err) / nf.sqrt(),
            rmse: (self.err.iter().map(|e| e * e).sum::<f64>() / nf).sqrt(),
            coverage: cov,
            coverage_mcse: (cov * (1.0 - cov) / nf).sqrt(),
            mean_se: mean(&self.se),
            sd_estimate: sd(&self.est),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub replications: usize,
    pub succeeded: usize,
    pub failures: Vec<(usize, String)>,
    /// Event-time ATT, pooled over replications and event times.
    pub att: MetricSummary,
    /// Time-averaged ATT.
    pub att_average: MetricSummary,
    pub group: Option<MetricSummary>,
    pub group_average: Option<MetricSummary>,
    /// `(name, mean estimate - truth)`; linear DGP only.
    pub coefficient_bias: Vec<(String, f64)>,
    /// Mean absolute error of the imputed untreated outcomes on MISS cells.
    pub imputation_mae: f64,
    /// `(r, replications)` for every selected factor count.
    pub r_hat_counts: Vec<(usize, usize)>,
    /// Share of replications whose time-averaged ATT band lies below zero.
    pub share_significant_negative: f64,
    /// Mean over replications of the share of event-time bands containing 0.
    pub zero_coverage: f64,
    pub config_sha256: String,
}

struct RepOutcome {
    att: Vec<(f64, f64, f64, f64, f64)>,
    att_avg: (f64, f64, f64, f64, f64),
    group: Vec<(f64, f64, f64, f64, f64)>,
    group_avg: Option<(f64, f64, f64, f64, f64)>,
    coefficients: Vec<(String, f64)>,
    mae: f64,
    r: usize,
    zero_share: f64,
}

/// Seed of replication `rep`: the first draw of stream `rep + 1` of the
/// master seed.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64 + 1);
    rng.random()
}

fn one_replication(cfg: &McConfig, rep: usize) -> Result<RepOutcome> {
    let panel = cfg.dgp.generate(replication_seed(cfg.seed, rep))?;
    let mut est_cfg = cfg.estimation.clone();
    est_cfg.groups = match cfg.group_size {
        Some(k) => vec![Group::new("study", panel.treated_names(k))],
        None => vec![],
    };
    let est = estimate_detailed(&panel.dataset, &est_cfg)?;
    let b = &est.bundle;

    let att: Vec<_> = b
        .att
        .rows
        .iter()
        .map(|r| (r.estimate, panel.true_att(r.event_time), r.se, r.ci_lo, r.ci_hi))
        .collect();
    let avg_truth = att.iter().map(|a| a.1).sum::<f64>() / att.len() as f64;
    let a = &b.att.average;
    let att_avg = (a.estimate, avg_truth, a.se, a.ci_lower, a.ci_upper);
    let zero_share =
        att.iter().filter(|a| a.3 <= 0.0 && 0.0 <= a.4).count() as f64 / att.len().max(1) as f64;

    let (group, group_avg) = match (b.groups.first(), est.effects.groups.first()) {
        (Some(g), Some(ge)) => {
            let rows: Vec<_> = g
                .table
                .rows
                .iter()
                .map(|r| {
                    let truth = panel.true_group_att(r.event_time, &ge.members);
                    (r.estimate, truth, r.se, r.ci_lo, r.ci_hi)
                })
                .collect();
            let truth = rows.iter().map(|x| x.1).sum::<f64>() / rows.len() as f64;
            let a = &g.table.average;
            (rows, Some((a.estimate, truth, a.se, a.ci_lower, a.ci_upper)))
        }
        _ => (Vec::new(), None),
    };

    let coefficients = match cfg.dgp.true_coefficients() {
        Some(truth) => b
            .diagnostics
            .coefficients
            .iter()
            .zip(truth)
            .map(|((name, v), t)| (name.clone(), v - t))
            .collect(),
        None => Vec::new(),
    };

    let (mut sum, mut count) = (0.0, 0usize);
    for (t, i) in est.blocks.miss_cells() {
        let d = est.imputed.y0_hat[(t, i)] - panel.y0[(t, i)];
        if d.is_finite() {
            sum += d.abs();
            count += 1;
        }
    }
    Ok(RepOutcome {
        att,
        att_avg,
        group,
        group_avg,
        coefficients,
        mae: sum / count.max(1) as f64,
        r: b.diagnostics.r,
        zero_share,
    })
}

/// Runs the study. Replications execute in parallel; aggregation follows
/// replication order so the report is bit-identical for a given seed.
pub fn run_monte_carlo(cfg: &McConfig) -> Result<McReport> {
    if cfg.replications < 2 {
        return Err(Error::Config(format!(
            "a Monte Carlo study needs at least 2 replications, got {}",
            cfg.replications
        )));
    }
    cfg.estimation.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| one_replication(cfg, rep))
        .collect();

    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    if failures.len() as f64 > cfg.max_failure_rate * cfg.replications as f64 || ok.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: cfg.replications,
            first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    for (rep, msg) in &failures {
        log::warn!("replication {rep} failed: {msg}");
    }

    let (mut att, mut att_avg, mut grp, mut grp_avg) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    let mut coef: Vec<(String, f64)> = Vec::new();
    let mut r_counts: Vec<(usize, usize)> = Vec::new();
    let (mut mae, mut sig_neg, mut zero) = (0.0, 0usize, 0.0);
    for o in &ok {
        for &(e, t, s, lo, hi) in &o.att {
            att.push(e, t, s, lo, hi);
        }
        let (e, t, s, lo, hi) = o.att_avg;
        att_avg.push(e, t, s, lo, hi);
        if hi < 0.0 {
            sig_neg += 1;
        }
        for &(e, t, s, lo, hi) in &o.group {
            grp.push(e, t, s, lo, hi);
        }
        if let Some((e, t, s, lo, hi)) = o.group_avg {
            grp_avg.push(e, t, s, lo, hi);
        }
        for (k, (name, d)) in o.coefficients.iter().enumerate() {
            if coef.len() <= k {
                coef.push((name.clone(), 0.0));
            }
            coef[k].1 += d;
        }
        match r_counts.iter_mut().find(|c| c.0 == o.r) {
            Some(c) => c.1 += 1,
            None => r_counts.push((o.r, 1)),
        }
        mae += o.mae;
        zero += o.zero_share;
    }
    let m = ok.len() as f64;
    for c in &mut coef {
        c.1 /= m;
    }
    r_counts.sort_unstable();
    let config_json = serde_json::to_vec(cfg).expect("config serialises");
    Ok(McReport {
        replications: cfg.replications,
        succeeded: ok.len(),
        failures,
        att: att.summary(),
        att_average: att_avg.summary(),
        group: (!grp.err.is_empty()).then(|| grp.summary()),
        group_average: (!grp_avg.err.is_empty()).then(|| grp_avg.summary()),
        coefficient_bias: coef,
        imputation_mae: mae / m,
        r_hat_counts: r_counts,
        share_significant_negative: sig_neg as f64 / m,
        zero_coverage: zero / m,
        config_sha256: {
            use sha2::{Digest, Sha256};
            hex::encode(Sha256::digest(&config_json))
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize) -> McConfig {
        McConfig {
            replications: reps,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_single_replication() {
        assert!(run_monte_carlo(&small(1)).is_err());
    }

    #[test]
    fn report_is_reproducible() {
        let a = run_monte_carlo(&small(4)).unwrap();
        let b = run_monte_carlo(&small(4)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.succeeded, 4);
        let c = run_monte_carlo(&McConfig { seed: 8, ..small(4) }).unwrap();
        assert_ne!(a.att, c.att);
    }

    #[test]
    fn failures_abort_above_threshold() {
        let cfg = McConfig {
            estimation: RunConfig {
                r: Some(30),
                ..Default::default()
            },
            ..small(3)
        };
        let err = run_monte_carlo(&cfg).unwrap_err();
        assert!(matches!(err, Error::TooManyFailures { failed: 3, total: 3, .. }), "{err}");
    }

    #[test]
    fn seir_truth_is_zero_before_policy_and_under_placebo() {
        let dgp = SeirDgp {
            policy_multiplier: 1.0,
            ..Default::default()
        };
        let p = dgp.generate(3).unwrap();
        assert!(p.theta_it.iter().all(|v| v.is_nan() || *v == 0.0));
        let p = SeirDgp::default().generate(3).unwrap();
        let late = p.true_att(20);
        assert!(late < 0.0, "{late}");
    }
}
