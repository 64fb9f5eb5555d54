//! Deterministic CSV / text export of a [`ResultsBundle`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EffectTable, ResultsBundle};
use crate::error::{Error, Result, Stage};
use crate::panel::Matrix;
use crate::seir::{PanelSimConfig, SimulatedPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    /// `att.csv`, `group_<name>.csv`, `diagnostics.txt`
    Csv,
    /// `*_plot.csv` with event time, estimate and band only.
    PlotData,
    /// `results.json`
    Json,
}

/// 12 significant digits in scientific notation; empty for non-finite.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.11e}")
    } else {
        String::new()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(body).map_err(|e| io_err(path, e))
}

fn table_csv(table: &EffectTable) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        path: PathBuf::from("<memory>"),
        source: e,
    };
    w.write_record(["event_time", "estimate", "se", "ci_lo", "ci_hi", "n_units"])
        .map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.event_time.to_string(),
            format_number(r.estimate),
            format_number(r.se),
            format_number(r.ci_lo),
            format_number(r.ci_hi),
            r.n_units.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })
}

fn plot_csv(table: &EffectTable) -> Vec<u8> {
    let mut out = String::from("event_time,estimate,ci_lo,ci_hi\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.event_time,
            format_number(r.estimate),
            format_number(r.ci_lo),
            format_number(r.ci_hi)
        ));
    }
    out.into_bytes()
}

fn diagnostics_text(b: &ResultsBundle) -> String {
    let d = &b.diagnostics;
    let v = &d.validity;
    let mut s = String::new();
    let mut line = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
    line("units", format!("N={} N0={} N1={}", d.n, d.n0, d.n1));
    line("periods", format!("T={} T0={}", d.t, d.t0_common));
    line("factors", d.r.to_string());
    if let (Some(a), Some(w)) = (d.r_tall, d.r_wide) {
        line("factors_selected", format!("r_tall={a} r_wide={w}"));
    }
    for (name, c) in &d.coefficients {
        line(&format!("coef[{name}]"), format_number(*c));
    }
    line("ife_converged", d.converged.to_string());
    line("ife_iterations", d.iterations.to_string());
    line("ife_objective", format_number(d.objective));
    line("sigma_e2", format_number(d.sigma_e2));
    line("delta", format_number(d.delta));
    line(
        "order_tall",
        format!("T*N0={} > r(T+N0)={} {}", v.tall.lhs, v.tall.rhs, v.tall.holds()),
    );
    line(
        "order_wide",
        format!("N*T0={} > r(N+T0)={} {}", v.wide.lhs, v.wide.rhs, v.wide.holds()),
    );
    line("sqrt_n_ratio", format_number(v.sqrt_n_ratio));
    line("sqrt_t_ratio", format_number(v.sqrt_t_ratio));
    line("dof", v.dof.to_string());
    for w in &v.warnings {
        line("warning", w.clone());
    }
    if !d.singular_units.is_empty() {
        line("singular_units", d.singular_units.join(" "));
    }
    let a = &b.att.average;
    line(
        "att_average",
        format!(
            "{} se={} ci=[{}, {}] periods={}",
            format_number(a.estimate),
            format_number(a.se),
            format_number(a.ci_lower),
            format_number(a.ci_upper),
            a.periods
        ),
    );
    for g in &b.groups {
        let a = &g.table.average;
        line(
            &format!("group_average[{}]", g.name),
            format!(
                "{} se={} ci=[{}, {}] periods={}",
                format_number(a.estimate),
                format_number(a.se),
                format_number(a.ci_lower),
                format_number(a.ci_upper),
                a.periods
            ),
        );
    }
    line("config_sha256", b.provenance.config_sha256.clone());
    for i in &b.provenance.inputs {
        line("input", format!("{} sha256={}", i.path, i.sha256));
    }
    s
}

/// Writes the requested formats into `out_dir` (created if missing) and
/// returns the written paths in order.
pub fn export_results(bundle: &ResultsBundle, out_dir: &Path, formats: &[ExportFormat]) -> Result<Vec<PathBuf>> {
    export_inner(bundle, out_dir, formats).map_err(|e| e.in_stage(Stage::Export))
}

fn export_inner(bundle: &ResultsBundle, out_dir: &Path, formats: &[ExportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut manifest = Vec::new();
    let mut emit = |name: String, body: Vec<u8>| -> Result<()> {
        let p = out_dir.join(name);
        write_file(&p, &body)?;
        manifest.push(p);
        Ok(())
    };
    if formats.contains(&ExportFormat::Csv) {
        emit("att.csv".into(), table_csv(&bundle.att)?)?;
        for g in &bundle.groups {
            emit(format!("group_{}.csv", g.name), table_csv(&g.table)?)?;
        }
        emit("diagnostics.txt".into(), diagnostics_text(bundle).into_bytes())?;
    }
    if formats.contains(&ExportFormat::PlotData) {
        emit("att_plot.csv".into(), plot_csv(&bundle.att))?;
        for g in &bundle.groups {
            emit(format!("group_{}_plot.csv", g.name), plot_csv(&g.table))?;
        }
    }
    if formats.contains(&ExportFormat::Json) {
        let mut json = serde_json::to_vec_pretty(bundle).expect("bundle serialises");
        json.push(b'\n');
        emit("results.json".into(), json)?;
    }
    Ok(manifest)
}

fn long_csv(m: &Matrix, units: &[String], start: chrono::NaiveDate) -> Vec<u8> {
    let mut out = String::from("date,unit,value\n");
    for d in 0..m.nrows() {
        let date = start + chrono::Days::new(d as u64);
        for (i, u) in units.iter().enumerate() {
            // shortest round-trip representation
            out.push_str(&format!("{date},{u},{}\n", m[(d, i)]));
        }
    }
    out.into_bytes()
}

/// Writes a simulated panel as loader inputs: long-format `cases.csv`,
/// `deaths.csv` and `mobility.csv` over burn-in plus window, `policy.csv`
/// (stay-at-home columns) and the generating `simulation.json`.
pub fn export_simulation(sim: &SimulatedPanel, config: &PanelSimConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let inner = || -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let units = sim.dataset.units();
        let mut policy = String::from("unit,stay_home_announced,stay_home_effective\n");
        for (u, p) in units.iter().zip(&sim.policy_day) {
            let date = p.map(|d| (config.start_date + chrono::Days::new(d as u64)).to_string());
            let date = date.unwrap_or_default();
            policy.push_str(&format!("{u},{date},{date}\n"));
        }
        let mut json = serde_json::to_vec_pretty(config).expect("config serialises");
        json.push(b'\n');
        let files = [
            ("cases.csv", long_csv(&sim.path_cases, units, sim.path_start)),
            ("deaths.csv", long_csv(&sim.path_deaths, units, sim.path_start)),
            ("mobility.csv", long_csv(&sim.path_mobility, units, sim.path_start)),
            ("policy.csv", policy.into_bytes()),
            ("simulation.json", json),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let p = out_dir.join(name);
            write_file(&p, &body)?;
            written.push(p);
        }
        Ok(written)
    };
    inner().map_err(|e| e.in_stage(Stage::Export))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::Group;
    use crate::pipeline::{run_estimation, LinearFactorDgp, RunConfig};

    fn bundle(groups: bool) -> ResultsBundle {
        let panel = LinearFactorDgp::default().generate(2).unwrap();
        let config = RunConfig {
            groups: if groups {
                vec![Group::new("g1", panel.treated_names(10))]
            } else {
                vec![]
            },
            ..Default::default()
        };
        run_estimation(&panel.dataset, &config).unwrap()
    }

    #[test]
    fn number_format_has_twelve_digits() {
        assert_eq!(format_number(-0.098), "-9.80000000000e-2");
        assert_eq!(format_number(f64::NAN), "");
        let v = 0.123456789012345;
        let back: f64 = format_number(v).parse().unwrap();
        assert!(((back - v) / v).abs() < 5e-12);
    }

    #[test]
    fn minimal_output_without_groups() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_results(&bundle(false), dir.path(), &[ExportFormat::Csv]).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["att.csv", "diagnostics.txt"]);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn re_export_is_byte_identical() {
        let b = bundle(true);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let all = [ExportFormat::Csv, ExportFormat::PlotData, ExportFormat::Json];
        let f1 = export_results(&b, d1.path(), &all).unwrap();
        let f2 = export_results(&b, d2.path(), &all).unwrap();
        assert_eq!(f1.len(), 6);
        for (a, c) in f1.iter().zip(&f2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(c).unwrap(), "{a:?}");
        }
    }

    #[test]
    fn att_csv_round_trips_at_twelve_digits() {
        let b = bundle(false);
        let dir = tempfile::tempdir().unwrap();
        export_results(&b, dir.path(), &[ExportFormat::Csv]).unwrap();
        let mut rdr = csv::Reader::from_path(dir.path().join("att.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), b.att.rows.len());
        for (rec, row) in rows.iter().zip(&b.att.rows) {
            assert_eq!(rec[0].parse::<usize>().unwrap(), row.event_time);
            for (k, v) in [(1, row.estimate), (2, row.se), (3, row.ci_lo), (4, row.ci_hi)] {
                let back: f64 = rec[k].parse().unwrap();
                assert!((back - v).abs() <= 5e-12 * v.abs(), "{back} vs {v}");
            }
        }
    }
}
