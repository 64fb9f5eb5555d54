//! CSV ingestion: long-format `date,unit,value` series and the policy
//! timeline.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DateKind, RunConfig};
use crate::error::{Error, Result, Stage};
use crate::panel::{compute_growth_rate, Covariate, Matrix, PanelDataset};
use crate::seir::Outcome;

/// Stay-at-home timeline shipped with the crate (55 jurisdictions).
pub const BUNDLED_TIMELINE: &str = include_str!("../../data/stay_home_timeline.csv");
const BUNDLED_LABEL: &str = "<bundled stay_home_timeline.csv>";

/// Per-unit policy dates, one column per policy/date kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTimeline {
    pub units: Vec<String>,
    pub names: Vec<String>,
    columns: Vec<String>,
    dates: Vec<Vec<Option<NaiveDate>>>,
}

impl PolicyTimeline {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TIMELINE.as_bytes(), Path::new(BUNDLED_LABEL)).expect("bundled timeline parses")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Self::parse(&bytes[..], path)
    }

    /// Parses a CSV with a `unit` column, an optional `name` column and any
    /// number of ISO date columns (blank = never).
    pub fn parse(reader: impl std::io::Read, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let unit_col = headers.iter().position(|h| h == "unit").ok_or_else(|| Error::Data {
            path: path.into(),
            row: 1,
            message: "policy file has no 'unit' column".into(),
        })?;
        let name_col = headers.iter().position(|h| h == "name");
        let date_cols: Vec<usize> = (0..headers.len())
            .filter(|&c| c != unit_col && Some(c) != name_col)
            .collect();
        let mut tl = PolicyTimeline {
            units: Vec::new(),
            names: Vec::new(),
            columns: date_cols.iter().map(|&c| headers[c].to_string()).collect(),
            dates: vec![Vec::new(); date_cols.len()],
        };
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 2;
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let unit = rec.get(unit_col).unwrap_or("").trim().to_string();
            if unit.is_empty() {
                return Err(data_err(path, row, "empty unit code"));
            }
            if tl.units.contains(&unit) {
                return Err(data_err(path, row, &format!("duplicate unit '{unit}'")));
            }
            for (slot, &c) in date_cols.iter().enumerate() {
                let raw = rec.get(c).unwrap_or("").trim();
                let date = if raw.is_empty() {
                    None
                } else {
                    Some(parse_date(raw).ok_or_else(|| {
                        data_err(path, row, &format!("column '{}': '{raw}' is not an ISO date", headers[c].trim()))
                    })?)
                };
                tl.dates[slot].push(date);
            }
            tl.names
                .push(name_col.and_then(|c| rec.get(c)).unwrap_or(&unit).trim().to_string());
            tl.units.push(unit);
        }
        Ok(tl)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Resolves a policy name to a column: the name itself if present,
    /// otherwise `<policy>_announced` / `<policy>_effective`.
    pub fn resolve(&self, policy: &str, kind: DateKind) -> Result<&[Option<NaiveDate>]> {
        let suffixed = format!("{policy}_{}", kind.suffix());
        let idx = self
            .columns
            .iter()
            .position(|c| c == policy)
            .or_else(|| self.columns.iter().position(|c| *c == suffixed))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy column '{policy}' (available: {})",
                    self.columns.join(", ")
                ))
            })?;
        Ok(&self.dates[idx])
    }

    /// Adoption row per unit on a calendar starting at `start` with `t` days.
    /// Dates after the window mean "never"; dates before it mean row 0.
    pub fn adoption_rows(
        &self,
        policy: &str,
        kind: DateKind,
        start: NaiveDate,
        t: usize,
    ) -> Result<Vec<Option<usize>>> {
        let col = self.resolve(policy, kind)?;
        Ok(col
            .iter()
            .map(|d| {
                d.and_then(|d| {
                    let off = (d - start).num_days().max(0) as usize;
                    (off < t).then_some(off)
                })
            })
            .collect())
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

fn data_err(path: &Path, row: usize, message: &str) -> Error {
    Error::Data {
        path: path.into(),
        row,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.into(),
        source: e,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Named covariate built from one or more long-format files (earlier files
/// take precedence).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSource {
    pub name: String,
    pub files: Vec<PathBuf>,
}

/// Input files for [`load_panel`]. Within each list, earlier files take
/// precedence: a later file only fills cells the earlier ones lack.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelInputs {
    pub cases: Vec<PathBuf>,
    pub deaths: Vec<PathBuf>,
    /// Behavioural covariates, lagged by `lag_m`.
    pub mobility: Vec<NamedSource>,
    /// Contemporaneous confounders.
    pub confounders: Vec<NamedSource>,
    /// Policy timeline; `None` uses the bundled stay-at-home timeline.
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub dataset: PanelDataset,
    pub inputs: Vec<InputDigest>,
}

/// A merged `days x N` matrix on an extended calendar plus, for every
/// filled cell, where it came from.
struct Merged {
    values: Matrix,
    origin: Vec<Vec<Option<(usize, usize)>>>,
    files: Vec<PathBuf>,
}

impl Merged {
    fn locate(&self, day: usize, unit: usize) -> (PathBuf, usize) {
        match self.origin[unit][day] {
            Some((f, row)) => (self.files[f].clone(), row),
            None => (self.files.first().cloned().unwrap_or_default(), 0),
        }
    }
}

fn merge_long(
    files: &[PathBuf],
    units: &[String],
    start: NaiveDate,
    days: usize,
    digests: &mut Vec<InputDigest>,
) -> Result<Merged> {
    let index: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut values = Matrix::from_element(days, units.len(), f64::NAN);
    let mut origin = vec![vec![None; days]; units.len()];
    for (f, path) in files.iter().enumerate() {
        let bytes = read_bytes(path)?;
        digests.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        let mut rdr = csv::Reader::from_reader(&bytes[..]);
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| data_err(path, 1, &format!("missing '{name}' column")))
        };
        let (dc, uc, vc) = (col("date")?, col("unit")?, col("value")?);
        let mut seen: HashMap<(NaiveDate, usize), usize> = HashMap::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 2;
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let raw_date = rec.get(dc).unwrap_or("").trim();
            let date = parse_date(raw_date)
                .ok_or_else(|| data_err(path, row, &format!("'{raw_date}' is not an ISO date")))?;
            let unit = rec.get(uc).unwrap_or("").trim();
            let &i = index
                .get(unit)
                .ok_or_else(|| data_err(path, row, &format!("unknown unit code '{unit}'")))?;
            if let Some(first) = seen.insert((date, i), row) {
                return Err(data_err(
                    path,
                    row,
                    &format!("duplicate (date, unit) key ({date}, {unit}); first seen on row {first}"),
                ));
            }
            let raw_value = rec.get(vc).unwrap_or("").trim();
            if raw_value.is_empty() || raw_value.eq_ignore_ascii_case("na") {
                continue;
            }
            let v: f64 = raw_value
                .parse()
                .map_err(|_| data_err(path, row, &format!("'{raw_value}' is not a number")))?;
            let off = (date - start).num_days();
            if off < 0 || off >= days as i64 {
                continue;
            }
            let d = off as usize;
            if values[(d, i)].is_nan() {
                values[(d, i)] = v;
                origin[i][d] = Some((f, row));
            }
        }
    }
    Ok(Merged {
        values,
        origin,
        files: files.to_vec(),
    })
}

fn require_window(m: &Merged, what: &str, units: &[String], from: usize, start: NaiveDate) -> Result<()> {
    for i in 0..units.len() {
        for d in from..m.values.nrows() {
            if m.values[(d, i)].is_nan() {
                let date = start + chrono::Days::new(d as u64);
                return Err(Error::Data {
                    path: m.files.first().cloned().unwrap_or_default(),
                    row: 0,
                    message: format!("{what}: no value for unit '{}' on {date}", units[i]),
                });
            }
        }
    }
    Ok(())
}

/// Builds the analysis panel: weekly log-growth outcome, lagged behavioural
/// covariates and contemporaneous confounders on the configured window.
pub fn load_panel(inputs: &PanelInputs, config: &RunConfig) -> Result<LoadedPanel> {
    load_inner(inputs, config).map_err(|e| e.in_stage(Stage::Load))
}

fn load_inner(inputs: &PanelInputs, config: &RunConfig) -> Result<LoadedPanel> {
    config.validate()?;
    let mut digests = Vec::new();
    let timeline = match &inputs.policy {
        Some(p) => {
            let bytes = read_bytes(p)?;
            digests.push(InputDigest {
                path: p.display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            PolicyTimeline::parse(&bytes[..], p)?
        }
        None => PolicyTimeline::bundled(),
    };
    let t = config.window_days();
    let lag = config.lag();
    let lead = lag.max(config.growth_window + 1);
    let ext_start = config.start - chrono::Days::new(lead as u64);
    let ext_days = t + lead;
    let units = timeline.units.clone();
    config.check_groups(&units)?;
    let adoption = timeline.adoption_rows(&config.policy, config.date_kind, config.start, t)?;

    let outcome_files = match config.outcome {
        Outcome::Cases => &inputs.cases,
        Outcome::Deaths => &inputs.deaths,
    };
    if outcome_files.is_empty() {
        return Err(Error::Config(format!("no input files for the {:?} outcome", config.outcome)));
    }
    let cum = merge_long(outcome_files, &units, ext_start, ext_days, &mut digests)?;
    require_window(&cum, "cumulative counts", &units, lead - config.growth_window - 1, ext_start)?;

    let mut y = Matrix::from_element(t, units.len(), f64::NAN);
    for i in 0..units.len() {
        let series: Vec<f64> = cum.values.column(i).iter().copied().collect();
        let growth = compute_growth_rate(&series, config.growth_window).map_err(|e| match e {
            Error::DecreasingCumulative {
                index,
                previous,
                current,
            } => {
                let (path, row) = cum.locate(index, i);
                let date = ext_start + chrono::Days::new(index as u64);
                Error::Data {
                    path,
                    row,
                    message: format!(
                        "cumulative count for '{}' decreases on {date} ({previous} -> {current})",
                        units[i]
                    ),
                }
            }
            e => e,
        })?;
        for s in 0..t {
            if let Some(v) = growth.values[lead + s] {
                y[(s, i)] = v;
            }
        }
    }

    let mut x = Vec::new();
    for src in &inputs.mobility {
        let raw = merge_long(&src.files, &units, ext_start, ext_days, &mut digests)?;
        require_window(&raw, &src.name, &units, lead - lag, ext_start)?;
        // row s of the window holds the raw value lag days earlier
        let values = Matrix::from_fn(t, units.len(), |s, i| raw.values[(lead + s - lag, i)]);
        x.push(Covariate::new(src.name.clone(), values));
    }
    let mut z = Vec::new();
    for src in &inputs.confounders {
        let raw = merge_long(&src.files, &units, ext_start, ext_days, &mut digests)?;
        require_window(&raw, &src.name, &units, lead, ext_start)?;
        let values = Matrix::from_fn(t, units.len(), |s, i| raw.values[(lead + s, i)]);
        z.push(Covariate::new(src.name.clone(), values));
    }

    let dates = (0..t).map(|s| config.start + chrono::Days::new(s as u64)).collect();
    let dataset = PanelDataset::from_adoption(units, dates, y, &adoption, x, z)?;
    Ok(LoadedPanel {
        dataset,
        inputs: digests,
    })
}

/// A panel with the bundled (or given) timeline's treatment structure and
/// no outcome data, for structural checks of the block layout.
pub fn timeline_dataset(timeline: &PolicyTimeline, config: &RunConfig) -> Result<PanelDataset> {
    config.validate()?;
    let t = config.window_days();
    let adoption = timeline.adoption_rows(&config.policy, config.date_kind, config.start, t)?;
    let dates = (0..t).map(|s| config.start + chrono::Days::new(s as u64)).collect();
    PanelDataset::from_adoption(
        timeline.units.clone(),
        dates,
        Matrix::from_element(t, timeline.units.len(), f64::NAN),
        &adoption,
        vec![],
        vec![],
    )
}
