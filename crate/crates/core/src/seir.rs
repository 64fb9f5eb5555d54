//! Two-location SEIR model with split incubation/infectious stages, a
//! reporting queue, a travel fraction, and a geometric-random-walk
//! transmission rate. Used to generate synthetic treatment panels.
//!
//! Each simulated state runs its own origin/destination pair; states are not
//! coupled. Compartments are real-valued and updated once per day.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{compute_growth_rate, Covariate, Matrix, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeirParams {
    /// Progression rate through each incubation stage is `2 sigma`.
    pub sigma: f64,
    /// Progression rate through each infectious stage is `2 gamma`.
    pub gamma: f64,
    pub kappa: f64,
    pub eta: f64,
    /// Share of new exposures that travel to the destination.
    pub f: f64,
    pub population: f64,
}

impl SeirParams {
    /// Checks that every per-day transition share lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::SeirStability(what));
        let finite = [self.sigma, self.gamma, self.kappa, self.eta, self.f, self.population];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite parameter in {self:?}"));
        }
        if self.sigma < 0.0 || 2.0 * self.sigma > 1.0 {
            return bad(format!("2*sigma = {} not in [0, 1]", 2.0 * self.sigma));
        }
        if self.gamma < 0.0 || 2.0 * self.gamma > 1.0 {
            return bad(format!("2*gamma = {} not in [0, 1]", 2.0 * self.gamma));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa = {} not in [0, 1]", self.kappa));
        }
        // (1 - kappa) eta + kappa eta = eta
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta = {} not in [0, 1]", self.eta));
        }
        if !(0.0..=1.0).contains(&self.f) {
            return bad(format!("f = {} not in [0, 1]", self.f));
        }
        if self.population <= 0.0 {
            return bad(format!("population = {} must be positive", self.population));
        }
        Ok(())
    }
}

/// Origin compartments followed by the destination (traveller) compartments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SeirState {
    pub s: f64,
    pub e1: f64,
    pub e2: f64,
    pub i1: f64,
    pub i2: f64,
    pub q: f64,
    pub c: f64,
    pub d: f64,
    pub e1j: f64,
    pub e2j: f64,
    pub i1j: f64,
    pub i2j: f64,
    pub qj: f64,
    pub cj: f64,
    pub dj: f64,
}

impl SeirState {
    /// Fully susceptible population with `infectious` cases in `I1`.
    pub fn seeded(population: f64, infectious: f64) -> Self {
        SeirState {
            s: population - infectious,
            i1: infectious,
            ..Default::default()
        }
    }

    pub fn compartments(&self) -> [f64; 15] {
        [
            self.s, self.e1, self.e2, self.i1, self.i2, self.q, self.c, self.d, self.e1j, self.e2j, self.i1j,
            self.i2j, self.qj, self.cj, self.dj,
        ]
    }

    /// New exposures generated by the origin at transmission rate `beta`.
    pub fn new_exposures(&self, params: &SeirParams, beta: f64) -> f64 {
        beta * self.s * (self.i1 + self.i2) / params.population
    }
}

/// One day of the law of motion.
///
/// The destination queue follows its own previous value (`Q_j`); the
/// destination receives the share `f` of the origin's new exposures and
/// generates no local transmission.
pub fn seir_step(state: &SeirState, params: &SeirParams, beta: f64) -> Result<SeirState> {
    params.validate()?;
    if !(beta >= 0.0) {
        return Err(Error::SeirStability(format!("beta = {beta} is negative")));
    }
    let x = *state;
    let force = beta * (x.i1 + x.i2) / params.population;
    if force > 1.0 {
        return Err(Error::SeirStability(format!(
            "beta * (I1 + I2) / N = {force} exceeds 1"
        )));
    }
    let (sg, gm, k, eta, f) = (params.sigma, params.gamma, params.kappa, params.eta, params.f);
    let new = x.new_exposures(params, beta);
    let delay = (-gm * k).exp();
    Ok(SeirState {
        s: x.s - new,
        e1: x.e1 + (1.0 - f) * new - 2.0 * sg * x.e1,
        e2: x.e2 + 2.0 * sg * x.e1 - 2.0 * sg * x.e2,
        i1: x.i1 + 2.0 * sg * x.e2 - 2.0 * gm * x.i1,
        i2: x.i2 + 2.0 * gm * x.i1 - 2.0 * gm * x.i2,
        q: x.q + 2.0 * sg * x.e2 * delay - k * x.q,
        c: x.c + (1.0 - k) * eta * x.q,
        d: x.d + k * eta * x.q,
        e1j: x.e1j + f * new - 2.0 * sg * x.e1j,
        e2j: x.e2j + 2.0 * sg * x.e1j - 2.0 * sg * x.e2j,
        i1j: x.i1j + 2.0 * sg * x.e2j - 2.0 * gm * x.i1j,
        i2j: x.i2j + 2.0 * gm * x.i1j - 2.0 * gm * x.i2j,
        qj: x.qj + 2.0 * sg * x.e2j * delay - k * x.qj,
        cj: x.cj + (1.0 - k) * eta * x.qj,
        dj: x.dj + k * eta * x.qj,
    })
}

/// Runs `betas.len()` steps and returns the trajectory including the
/// initial state.
pub fn simulate_trajectory(init: SeirState, params: &SeirParams, betas: &[f64]) -> Result<Vec<SeirState>> {
    params.validate()?;
    let mut path = Vec::with_capacity(betas.len() + 1);
    path.push(init);
    for &b in betas {
        let next = seir_step(path.last().expect("non-empty"), params, b)?;
        path.push(next);
    }
    Ok(path)
}

/// Geometric random walk `log b_{t+1} = log b_t + vol * eps_t`, starting at
/// `beta0`, reproducible from `seed`.
pub fn transmission_walk(beta0: f64, step_volatility: f64, t: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    walk_with(&mut rng, beta0, step_volatility, t)
}

fn walk_with(rng: &mut ChaCha8Rng, beta0: f64, vol: f64, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    let mut log_b = beta0.ln();
    for _ in 0..t {
        out.push(log_b.exp());
        let eps: f64 = rng.sample(StandardNormal);
        log_b += vol * eps;
    }
    out
}

/// One simulated jurisdiction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub name: String,
    pub params: SeirParams,
    pub beta0: f64,
    /// Window row at which the policy is announced (`None` = never).
    pub policy_day: Option<usize>,
    /// Burn-in day on which the first infectious case appears.
    pub seed_day: usize,
}

/// Which cumulative series the growth-rate outcome is built from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    Cases,
    Deaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSimConfig {
    pub states: Vec<StateSpec>,
    /// Reported window length `T`.
    pub days: usize,
    /// Simulated days before the window opens.
    pub burn_in: usize,
    pub start_date: NaiveDate,
    /// Volatility of the walk shared by all states.
    pub common_volatility: f64,
    /// Volatility of each state's own walk.
    pub unit_volatility: f64,
    /// Multiplier applied to `beta` from the policy day on.
    pub policy_multiplier: f64,
    /// Standard deviation of log-normal noise on reported daily increments.
    pub observation_noise: f64,
    pub growth_window: usize,
    /// Lag of the mobility covariate.
    pub mobility_lag: usize,
    pub outcome: Outcome,
}

/// Ranges from which [`PanelSimConfig::random`] draws state parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelShape {
    pub n_units: usize,
    pub n_control: usize,
    pub days: usize,
    /// First policy row; treated units announce within `policy_spread` days.
    pub first_policy_day: usize,
    pub policy_spread: usize,
}

impl Default for PanelShape {
    fn default() -> Self {
        PanelShape {
            n_units: 55,
            n_control: 16,
            days: 61,
            first_policy_day: 28,
            policy_spread: 14,
        }
    }
}

impl PanelSimConfig {
    /// Heterogeneous states with parameters drawn around typical values.
    /// Unit 0 is the origin, seeded on day 0; the others are seeded within
    /// the first ten burn-in days.
    pub fn random(shape: PanelShape, policy_multiplier: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = (0..shape.n_units)
            .map(|i| {
                let gamma = rng.random_range(0.25..0.40);
                let params = SeirParams {
                    sigma: rng.random_range(0.15..0.25),
                    gamma,
                    kappa: rng.random_range(0.01..0.03),
                    eta: rng.random_range(0.08..0.12),
                    f: rng.random_range(0.05..0.15),
                    population: rng.random_range(1e6..2e7),
                };
                let r0: f64 = rng.random_range(1.6..2.4);
                let policy_day = (i >= shape.n_control)
                    .then(|| shape.first_policy_day + rng.random_range(0..=shape.policy_spread));
                StateSpec {
                    name: format!("S{i:02}"),
                    params,
                    beta0: r0 * gamma,
                    policy_day,
                    seed_day: if i == 0 { 0 } else { rng.random_range(1..=10) },
                }
            })
            .collect();
        PanelSimConfig {
            states,
            days: shape.days,
            burn_in: 40,
            start_date: NaiveDate::from_ymd_opt(2020, 2, 20).expect("valid date"),
            common_volatility: 0.03,
            unit_volatility: 0.01,
            policy_multiplier,
            observation_noise: 0.1,
            growth_window: 7,
            mobility_lag: 14,
            outcome: Outcome::Cases,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.states.len() < 2 {
            return Err(Error::Config("a simulated panel needs at least two states".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("simulated window is empty".into()));
        }
        if self.burn_in < self.mobility_lag.max(self.growth_window + 1) {
            return Err(Error::Config(format!(
                "burn-in of {} days is shorter than the mobility lag ({}) or growth window ({} + 1)",
                self.burn_in, self.mobility_lag, self.growth_window
            )));
        }
        if !(self.policy_multiplier >= 0.0) || !(self.observation_noise >= 0.0) {
            return Err(Error::Config("policy multiplier and observation noise must be non-negative".into()));
        }
        if !(self.common_volatility >= 0.0) || !(self.unit_volatility >= 0.0) {
            return Err(Error::Config("walk volatilities must be non-negative".into()));
        }
        for s in &self.states {
            s.params.validate()?;
            if !(s.beta0 > 0.0) {
                return Err(Error::SeirStability(format!("state '{}' has beta0 = {}", s.name, s.beta0)));
            }
            if s.seed_day >= self.burn_in + self.days {
                return Err(Error::Config(format!("state '{}' is seeded after the window", s.name)));
            }
            if s.policy_day.is_some_and(|p| p >= self.days) {
                return Err(Error::Config(format!("state '{}' adopts after the window", s.name)));
            }
        }
        Ok(())
    }
}

/// A simulated panel plus the latent paths behind it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub dataset: PanelDataset,
    /// Reported cumulative cases and deaths over the window (`T x N`).
    pub cases: Matrix,
    pub deaths: Matrix,
    /// Un-lagged mobility index over the window.
    pub mobility: Matrix,
    /// Transmission rate actually applied, over the window.
    pub beta: Matrix,
    pub policy_day: Vec<Option<usize>>,
    /// First date of the full paths (`burn_in` days before the window).
    pub path_start: NaiveDate,
    /// Reported cumulative cases, deaths and un-lagged mobility over burn-in
    /// plus window; row `burn_in + t` is window day `t`.
    pub path_cases: Matrix,
    pub path_deaths: Matrix,
    pub path_mobility: Matrix,
}

/// Generates a panel of growth-rate outcomes.
///
/// Random streams: stream 0 of `seed` drives the common walk; stream `i + 1`
/// drives state `i`'s own walk and observation noise.
pub fn simulate_panel(config: &PanelSimConfig, seed: u64) -> Result<SimulatedPanel> {
    config.validate()?;
    let total = config.burn_in + config.days;
    let n = config.states.len();

    let mut common_rng = ChaCha8Rng::seed_from_u64(seed);
    common_rng.set_stream(0);
    let common = walk_with(&mut common_rng, 1.0, config.common_volatility, total);

    let mut y = Matrix::from_element(config.days, n, f64::NAN);
    let mut cases = Matrix::zeros(config.days, n);
    let mut deaths = Matrix::zeros(config.days, n);
    let mut mobility = Matrix::zeros(config.days, n);
    let mut lagged_mobility = Matrix::zeros(config.days, n);
    let mut beta_out = Matrix::zeros(config.days, n);
    let mut path_cases = Matrix::zeros(total, n);
    let mut path_deaths = Matrix::zeros(total, n);
    let mut path_mobility = Matrix::zeros(total, n);

    for (i, spec) in config.states.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let own = walk_with(&mut rng, 1.0, config.unit_volatility, total);
        let pre_policy: Vec<f64> = (0..total).map(|d| spec.beta0 * common[d] * own[d]).collect();
        let policy_abs = spec.policy_day.map(|p| p + config.burn_in);
        let betas: Vec<f64> = (0..total)
            .map(|d| match policy_abs {
                Some(p) if d >= p => pre_policy[d] * config.policy_multiplier,
                _ => pre_policy[d],
            })
            .collect();

        let mut state = SeirState {
            s: spec.params.population,
            ..Default::default()
        };
        let mut reported_c = Vec::with_capacity(total + 1);
        let mut reported_d = Vec::with_capacity(total + 1);
        let (mut cum_c, mut cum_d) = (0.0, 0.0);
        reported_c.push(0.0);
        reported_d.push(0.0);
        for (day, &b) in betas.iter().enumerate() {
            if day == spec.seed_day {
                state.s -= 1.0;
                state.i1 += 1.0;
            }
            let next = seir_step(&state, &spec.params, b).map_err(|e| match e {
                Error::SeirStability(m) => Error::SeirStability(format!("state '{}', day {day}: {m}", spec.name)),
                e => e,
            })?;
            let (dc, dd) = (next.c - state.c, next.d - state.d);
            let noise = |rng: &mut ChaCha8Rng| {
                let z: f64 = rng.sample(StandardNormal);
                (config.observation_noise * z).exp()
            };
            cum_c += dc * noise(&mut rng);
            cum_d += dd * noise(&mut rng);
            reported_c.push(cum_c);
            reported_d.push(cum_d);
            state = next;
        }

        let series = match config.outcome {
            Outcome::Cases => &reported_c,
            Outcome::Deaths => &reported_d,
        };
        let growth = compute_growth_rate(series, config.growth_window)?;
        for d in 0..total {
            path_cases[(d, i)] = reported_c[d + 1];
            path_deaths[(d, i)] = reported_d[d + 1];
            path_mobility[(d, i)] = pre_policy[d] / spec.beta0;
        }
        for t in 0..config.days {
            // reported_* index k is the value after k steps
            let k = config.burn_in + t + 1;
            if let Some(v) = growth.values[k] {
                y[(t, i)] = v;
            }
            cases[(t, i)] = reported_c[k];
            deaths[(t, i)] = reported_d[k];
            let d = config.burn_in + t;
            mobility[(t, i)] = pre_policy[d] / spec.beta0;
            lagged_mobility[(t, i)] = pre_policy[d - config.mobility_lag] / spec.beta0;
            beta_out[(t, i)] = betas[d];
        }
    }

    let units = config.states.iter().map(|s| s.name.clone()).collect();
    let dates = (0..config.days)
        .map(|t| config.start_date + chrono::Days::new(t as u64))
        .collect();
    let policy_day: Vec<Option<usize>> = config.states.iter().map(|s| s.policy_day).collect();
    let dataset = PanelDataset::from_adoption(
        units,
        dates,
        y,
        &policy_day,
        vec![Covariate::new("mobility", lagged_mobility)],
        vec![],
    )?;
    Ok(SimulatedPanel {
        dataset,
        cases,
        deaths,
        mobility,
        beta: beta_out,
        policy_day,
        path_start: config.start_date - chrono::Days::new(config.burn_in as u64),
        path_cases,
        path_deaths,
        path_mobility,
    })
}
