use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use panel_impute::effects::{CovarianceEstimator, Group, GroupErrorScaling};
use panel_impute::factor::IcPenalty;
use panel_impute::panel::{decompose_blocks, validate_assumptions};
use panel_impute::pipeline::{
    export_results, export_simulation, load_panel, run_estimation, run_monte_carlo, timeline_dataset,
    DateKind, Dgp, EffectTable, ExportFormat, LinearFactorDgp, McConfig, NamedSource, Outcome, PanelInputs,
    PolicyTimeline, RunConfig, SeirDgp,
};
use panel_impute::seir::{simulate_panel, PanelShape, PanelSimConfig};
use panel_impute::Error;

const OUT_ENV: &str = "PANEL_IMPUTE_OUT";

/// Counterfactual imputation of policy effects in panels with interactive
/// fixed effects.
#[derive(Parser, Debug)]
#[command(name = "panel-impute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load long-format CSV inputs, estimate effects and export the results.
    Estimate(EstimateArgs),
    /// Simulate an SEIR panel and write it as loader inputs.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo coverage study and write `report.json`.
    Montecarlo(MonteCarloArgs),
    /// Check a configuration and the block layout it implies.
    Validate(ValidateArgs),
}

/// Flags mirroring the run configuration; each overrides `--config`.
#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration used as the base for the flags below.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// cases | deaths
    #[arg(long, value_parser = serde_enum::<Outcome>)]
    outcome: Option<Outcome>,
    /// Covariate lag in days (default 14 for cases, 21 for deaths).
    #[arg(long, value_name = "DAYS")]
    lag_m: Option<usize>,
    /// Policy column: stay_home, business_closure or any timeline column.
    #[arg(long)]
    policy: Option<String>,
    /// announced | effective
    #[arg(long, value_parser = serde_enum::<DateKind>)]
    date_kind: Option<DateKind>,
    #[arg(long, value_name = "YYYY-MM-DD")]
    start: Option<NaiveDate>,
    /// Last day of the window (inclusive).
    #[arg(long, value_name = "YYYY-MM-DD")]
    end: Option<NaiveDate>,
    #[arg(long, value_name = "DAYS")]
    growth_window: Option<usize>,
    /// Factor count: `auto` or a fixed number.
    #[arg(long, value_name = "auto|K", value_parser = parse_r)]
    r: Option<FactorCount>,
    #[arg(long, value_name = "K")]
    r_max: Option<usize>,
    /// ic1 | ic2 | ic3
    #[arg(long, value_parser = serde_enum::<IcPenalty>)]
    ic_penalty: Option<IcPenalty>,
    #[arg(long, value_name = "P")]
    ci_level: Option<f64>,
    /// Named unit group, `NAME=U1,U2,...` (repeatable).
    #[arg(long = "group", value_name = "NAME=UNITS", value_parser = parse_group)]
    groups: Vec<Group>,
    /// IFE relative convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// heteroskedastic | homoskedastic
    #[arg(long, value_parser = serde_enum::<CovarianceEstimator>)]
    covariance: Option<CovarianceEstimator>,
    /// group_mean | as_printed
    #[arg(long, value_parser = serde_enum::<GroupErrorScaling>)]
    group_scaling: Option<GroupErrorScaling>,
}

#[derive(Debug, Clone, Copy)]
enum FactorCount {
    Auto,
    Fixed(usize),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Cumulative case files; earlier files take precedence (repeatable).
    #[arg(long, value_name = "FILE")]
    cases: Vec<PathBuf>,
    /// Cumulative death files; earlier files take precedence (repeatable).
    #[arg(long, value_name = "FILE")]
    deaths: Vec<PathBuf>,
    /// Lagged behavioural covariate, `NAME=FILE[,FILE...]` (repeatable).
    #[arg(long, value_name = "NAME=FILES", value_parser = parse_source)]
    mobility: Vec<NamedSource>,
    /// Contemporaneous confounder, `NAME=FILE[,FILE...]` (repeatable).
    #[arg(long, value_name = "NAME=FILES", value_parser = parse_source)]
    confounder: Vec<NamedSource>,
    /// Policy timeline CSV (default: the bundled stay-at-home timeline).
    #[arg(long, value_name = "FILE")]
    policy_file: Option<PathBuf>,
}

impl InputArgs {
    fn to_inputs(&self) -> PanelInputs {
        PanelInputs {
            cases: self.cases.clone(),
            deaths: self.deaths.clone(),
            mobility: self.mobility.clone(),
            confounders: self.confounder.clone(),
            policy: self.policy_file.clone(),
        }
    }

    fn any_data(&self) -> bool {
        !self.cases.is_empty() || !self.deaths.is_empty()
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    inputs: InputArgs,
    /// Seed recorded in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = OUT_ENV, value_name = "DIR")]
    out: PathBuf,
    /// Output formats.
    #[arg(long, value_delimiter = ',', default_value = "csv,plot_data,json", value_parser = serde_enum::<ExportFormat>)]
    format: Vec<ExportFormat>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Full simulation configuration (as written to `simulation.json`);
    /// overrides every other simulation flag.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 55)]
    units: usize,
    #[arg(long, default_value_t = 16)]
    controls: usize,
    #[arg(long, default_value_t = 61)]
    days: usize,
    #[arg(long, default_value_t = 28)]
    first_policy_day: usize,
    #[arg(long, default_value_t = 14)]
    policy_spread: usize,
    /// Transmission multiplier after each treated state's policy day.
    #[arg(long, default_value_t = 0.7)]
    multiplier: f64,
    #[arg(long)]
    observation_noise: Option<f64>,
    #[arg(long)]
    common_volatility: Option<f64>,
    #[arg(long)]
    unit_volatility: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// First day of the observation window.
    #[arg(long, value_name = "YYYY-MM-DD")]
    start_date: Option<NaiveDate>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = OUT_ENV, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MonteCarloArgs {
    /// JSON Monte Carlo configuration used as the base for the flags below.
    #[arg(long, value_name = "FILE")]
    mc_config: Option<PathBuf>,
    /// linear_factor | seir
    #[arg(long, value_parser = ["linear_factor", "seir"])]
    dgp: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the study group; 0 disables group inference.
    #[arg(long)]
    group_size: Option<usize>,
    /// Post-policy transmission multiplier of the SEIR DGP.
    #[arg(long)]
    multiplier: Option<f64>,
    /// Planted effect of the linear-factor DGP.
    #[arg(long)]
    theta: Option<f64>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, env = OUT_ENV, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    inputs: InputArgs,
    /// Check the order conditions for every r up to this value.
    #[arg(long, default_value_t = 2)]
    r_check: usize,
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_r(s: &str) -> Result<FactorCount, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(FactorCount::Auto);
    }
    s.parse()
        .map(FactorCount::Fixed)
        .map_err(|_| format!("expected 'auto' or a non-negative integer, got '{s}'"))
}

fn split_named(s: &str) -> Result<(String, Vec<String>), String> {
    let (name, rest) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE[,VALUE...], got '{s}'"))?;
    let items: Vec<String> = rest.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    Ok((name.trim().to_string(), items))
}

fn parse_group(s: &str) -> Result<Group, String> {
    split_named(s).map(|(name, units)| Group::new(name, units))
}

fn parse_source(s: &str) -> Result<NamedSource, String> {
    let (name, files) = split_named(s)?;
    if files.is_empty() {
        return Err(format!("'{name}' names no files"));
    }
    Ok(NamedSource {
        name,
        files: files.into_iter().map(PathBuf::from).collect(),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> panel_impute::Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunArgs {
    fn resolve(&self, base: RunConfig) -> panel_impute::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => read_json(p)?,
            None => base,
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field.clone() { c.$field = v; })*};
        }
        set!(outcome, policy, date_kind, start, end, growth_window, ic_penalty, ci_level, covariance, group_scaling);
        if self.lag_m.is_some() {
            c.lag_m = self.lag_m;
        }
        if self.r_max.is_some() {
            c.r_max = self.r_max;
        }
        match self.r {
            Some(FactorCount::Auto) => c.r = None,
            Some(FactorCount::Fixed(k)) => c.r = Some(k),
            None => {}
        }
        if let Some(t) = self.tol {
            c.ife.tol = t;
        }
        if let Some(m) = self.max_iter {
            c.ife.max_iter = m;
        }
        if !self.groups.is_empty() {
            c.groups = self.groups.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_table(label: &str, t: &EffectTable) {
    println!("{label}");
    println!("{:>6} {:>12} {:>12} {:>12} {:>12} {:>5}", "s", "estimate", "se", "ci_lo", "ci_hi", "n");
    for r in &t.rows {
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>5}",
            r.event_time, r.estimate, r.se, r.ci_lo, r.ci_hi, r.n_units
        );
    }
    let a = &t.average;
    println!(
        "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>5}",
        "avg", a.estimate, a.se, a.ci_lower, a.ci_upper, a.periods
    );
}

fn estimate(args: &EstimateArgs) -> panel_impute::Result<()> {
    let mut config = args.run.resolve(RunConfig::default())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let loaded = load_panel(&args.inputs.to_inputs(), &config)?;
    log::info!(
        "loaded {} units x {} days",
        loaded.dataset.n_units(),
        loaded.dataset.n_periods()
    );
    let bundle = run_estimation(&loaded.dataset, &config)?.with_inputs(loaded.inputs);
    let files = export_results(&bundle, &args.out, &args.format)?;
    let d = &bundle.diagnostics;
    println!(
        "N={} N0={} N1={} T={} T0={} r={} converged={}",
        d.n, d.n0, d.n1, d.t, d.t0_common, d.r, d.converged
    );
    print_table("ATT", &bundle.att);
    for g in &bundle.groups {
        print_table(&format!("group {}", g.name), &g.table);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> panel_impute::Result<()> {
    let config: PanelSimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => {
            let shape = PanelShape {
                n_units: args.units,
                n_control: args.controls,
                days: args.days,
                first_policy_day: args.first_policy_day,
                policy_spread: args.policy_spread,
            };
            let mut c = PanelSimConfig::random(shape, args.multiplier, args.seed);
            if let Some(v) = args.observation_noise {
                c.observation_noise = v;
            }
            if let Some(v) = args.common_volatility {
                c.common_volatility = v;
            }
            if let Some(v) = args.unit_volatility {
                c.unit_volatility = v;
            }
            if let Some(v) = args.burn_in {
                c.burn_in = v;
            }
            if let Some(v) = args.start_date {
                c.start_date = v;
            }
            c
        }
    };
    let sim = simulate_panel(&config, args.seed).map_err(|e| e.in_stage(panel_impute::Stage::Simulate))?;
    let files = export_simulation(&sim, &config, &args.out)?;
    let last = config.start_date + chrono::Days::new(config.days.saturating_sub(1) as u64);
    println!(
        "simulated {} states over {} .. {} (seed {})",
        config.states.len(),
        config.start_date,
        last,
        args.seed
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn montecarlo(args: &MonteCarloArgs) -> panel_impute::Result<()> {
    let mut cfg: McConfig = match &args.mc_config {
        Some(p) => read_json(p)?,
        None => McConfig::default(),
    };
    match args.dgp.as_deref() {
        Some("seir") if !matches!(cfg.dgp, Dgp::Seir(_)) => cfg.dgp = Dgp::Seir(SeirDgp::default()),
        Some("linear_factor") if !matches!(cfg.dgp, Dgp::LinearFactor(_)) => {
            cfg.dgp = Dgp::LinearFactor(LinearFactorDgp::default())
        }
        _ => {}
    }
    match &mut cfg.dgp {
        Dgp::Seir(d) => {
            if let Some(m) = args.multiplier {
                d.policy_multiplier = m;
            }
        }
        Dgp::LinearFactor(d) => {
            if let Some(t) = args.theta {
                d.theta = t;
            }
        }
    }
    if let Some(n) = args.reps {
        cfg.replications = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(g) = args.group_size {
        cfg.group_size = (g > 0).then_some(g);
    }
    cfg.estimation = args.run.resolve(cfg.estimation.clone())?;

    let report = run_monte_carlo(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let path = args.out.join("report.json");
    let mut json = serde_json::to_vec_pretty(&report).expect("report serialises");
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!(
        "replications {} succeeded {} failed {}",
        report.replications,
        report.succeeded,
        report.failures.len()
    );
    let line = |name: &str, m: &panel_impute::pipeline::MetricSummary| {
        println!(
            "{name:<14} bias {:+.5} (mcse {:.5}) rmse {:.5} coverage {:.4} (mcse {:.4})",
            m.bias, m.bias_mcse, m.rmse, m.coverage, m.coverage_mcse
        )
    };
    line("att", &report.att);
    line("att_average", &report.att_average);
    if let (Some(g), Some(ga)) = (&report.group, &report.group_average) {
        line("group", g);
        line("group_average", ga);
    }
    println!("share significantly negative {:.4}", report.share_significant_negative);
    println!("zero coverage {:.4}", report.zero_coverage);
    println!("wrote {}", path.display());
    Ok(())
}

fn validate(args: &ValidateArgs) -> panel_impute::Result<()> {
    let config = args.run.resolve(RunConfig::default())?;
    let dataset = if args.inputs.any_data() {
        load_panel(&args.inputs.to_inputs(), &config)?.dataset
    } else {
        let timeline = match &args.inputs.policy_file {
            Some(p) => PolicyTimeline::from_path(p)?,
            None => PolicyTimeline::bundled(),
        };
        config.check_groups(&timeline.units)?;
        timeline_dataset(&timeline, &config)?
    };
    let blocks = decompose_blocks(&dataset, false)?;
    let k = dataset.x().len() + dataset.z().len();
    println!(
        "policy={}_{} N={} N0={} N1={} T={} T0={}",
        config.policy,
        config.date_kind.suffix(),
        blocks.n_units,
        blocks.n0(),
        blocks.treated_units.len(),
        blocks.n_periods,
        blocks.t0_common
    );
    let ranks: Vec<usize> = match config.r {
        Some(r) => vec![r],
        None => (0..=args.r_check).collect(),
    };
    let mut failed = Vec::new();
    for r in ranks {
        match validate_assumptions(&blocks, r, k) {
            Ok(v) => {
                println!(
                    "r={r}: tall {} > {} ok, wide {} > {} ok, dof {}",
                    v.tall.lhs, v.tall.rhs, v.wide.lhs, v.wide.rhs, v.dof
                );
                for w in &v.warnings {
                    println!("  warning: {w}");
                }
            }
            Err(Error::OrderCondition(m)) => {
                println!("r={r}: {m}");
                failed.push(r);
            }
            Err(e) => return Err(e),
        }
    }
    if failed.is_empty() {
        println!("order conditions hold");
        Ok(())
    } else {
        Err(Error::OrderCondition(format!("order conditions fail at r = {failed:?}")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
