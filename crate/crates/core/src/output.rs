//! CSV emission and parsing. Floats are written in shortest round-trip
//! scientific notation, so reading a file back reproduces the values
//! exactly. Result tables end with a provenance column.

use std::path::Path;

use nalgebra::DVector;

use crate::discretize::Backend;
use crate::experiment::{
    iterations_to_within, trajectory_mse, trajectory_reference, ErrorRow, ErrorTable, ExperimentError, TrajoptReport,
};
use crate::ilqr::Trajectory;
use crate::mpc::ClosedLoopResult;
use crate::reference::{mse_on_overlap, ReferenceTrajectory};

/// `git describe`-style tag of the running build.
pub const BUILD_TAG: &str = env!("VILQR_BUILD_TAG");

pub const ERROR_TABLE_HEADER: [&str; 10] =
    ["dt", "n_iter", "backend", "mse", "mean_iter_time", "n_iter_max", "feasible", "failed_steps", "status", "provenance"];

/// Columns that depend on wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 3] = ["mean_iter_time", "n_iter_max", "feasible"];

/// Trailing metadata cell identifying the configuration, backend and build.
pub fn provenance(config_hash: &str, backend: Option<Backend>) -> String {
    let backend = backend.map_or("all", |b| b.as_str());
    format!("cfg={config_hash};backend={backend};build={BUILD_TAG}")
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ExperimentError> {
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), ExperimentError> {
    w.flush().map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

fn trajectory_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    if m == 1 {
        h.push("u".into());
    } else {
        h.extend((1..=m).map(|i| format!("u{i}")));
    }
    h
}

/// One row per sample: `t, x1..xn, u`. Samples without an input (the final
/// state of a trajectory) carry `NaN`.
fn write_samples(
    path: &Path,
    times: &[f64],
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    input_dim: usize,
) -> Result<(), ExperimentError> {
    let n = states.first().map_or(0, |x| x.len());
    let mut w = writer(path)?;
    w.write_record(trajectory_header(n, input_dim)).map_err(csv_err(path))?;
    for (k, (t, x)) in times.iter().zip(states).enumerate() {
        let mut rec = vec![fmt_f64(*t)];
        rec.extend(x.iter().map(|v| fmt_f64(*v)));
        match inputs.get(k) {
            Some(u) => rec.extend(u.iter().map(|v| fmt_f64(*v))),
            None => rec.extend(std::iter::repeat_n(fmt_f64(f64::NAN), input_dim)),
        }
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_reference(path: &Path, r: &ReferenceTrajectory) -> Result<(), ExperimentError> {
    let m = r.inputs.first().map_or(0, |u| u.len());
    write_samples(path, &r.times, &r.states, &r.inputs, m)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), ExperimentError> {
    let m = traj.inputs.first().map_or(0, |u| u.len());
    write_samples(path, &traj.times(), &traj.states, &traj.inputs, m)
}

/// Per-step rows `k, t, x.., u.., iter_time_mean`; the final sample has no
/// input and no timing, written as NaN.
pub fn write_closed_loop(path: &Path, c: &ClosedLoopResult) -> Result<(), ExperimentError> {
    let n = c.states.first().map_or(0, |x| x.len());
    let m = c.inputs.first().map_or(1, |u| u.len());
    let mut header = vec!["k".to_string()];
    header.extend(trajectory_header(n, m));
    header.push("iter_time_mean".into());
    let mut w = writer(path)?;
    w.write_record(&header).map_err(csv_err(path))?;
    for (k, (t, x)) in c.times().iter().zip(&c.states).enumerate() {
        let mut rec = vec![k.to_string(), fmt_f64(*t)];
        rec.extend(x.iter().map(|v| fmt_f64(*v)));
        match c.inputs.get(k) {
            Some(u) => rec.extend(u.iter().map(|v| fmt_f64(*v))),
            None => rec.extend(std::iter::repeat_n(fmt_f64(f64::NAN), m)),
        }
        let mean =
            c.iter_times.get(k).filter(|ts| !ts.is_empty()).map_or(f64::NAN, |ts| ts.iter().sum::<f64>() / ts.len() as f64);
        rec.push(fmt_f64(mean));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Reads a file written by [`write_reference`] or [`write_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<ReferenceTrajectory, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let n = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.len().checked_sub(1 + n).filter(|&m| m > 0 && header.get(0) == Some("t"));
    let Some(m) = m else {
        return Err(format_err(path, "expected columns t, x1..xn, u"));
    };
    let (mut times, mut states, mut inputs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| format_err(path, format!("not a number: `{s}`"))))
            .collect::<Result<_, _>>()?;
        times.push(vals[0]);
        states.push(DVector::from_column_slice(&vals[1..1 + n]));
        inputs.push(DVector::from_column_slice(&vals[1 + n..1 + n + m]));
    }
    ReferenceTrajectory::new(times, states, inputs).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_error_table(path: &Path, table: &ErrorTable, config_hash: &str) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(ERROR_TABLE_HEADER).map_err(csv_err(path))?;
    for row in &table.rows {
        w.write_record([
            fmt_f64(row.dt),
            row.n_iter.to_string(),
            row.backend.as_str().to_string(),
            fmt_opt(row.mse.map(fmt_f64)),
            fmt_opt(row.mean_iter_time.map(fmt_f64)),
            fmt_opt(row.n_iter_max),
            fmt_opt(row.feasible),
            row.failed_steps.to_string(),
            row.error.as_ref().map_or_else(|| "ok".to_string(), |e| format!("error: {e}")),
            provenance(config_hash, Some(row.backend)),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn read_error_table(path: &Path) -> Result<ErrorTable, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(ERROR_TABLE_HEADER) {
        return Err(format_err(path, "unexpected header"));
    }
    fn opt<T: std::str::FromStr>(path: &Path, s: &str) -> Result<Option<T>, ExperimentError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| format_err(path, format!("cannot parse `{s}`")))
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let req = |i: usize| -> Result<&str, ExperimentError> { rec.get(i).ok_or_else(|| format_err(path, "short row")) };
        let status = req(8)?;
        rows.push(ErrorRow {
            dt: opt(path, req(0)?)?.ok_or_else(|| format_err(path, "missing dt"))?,
            n_iter: opt(path, req(1)?)?.ok_or_else(|| format_err(path, "missing n_iter"))?,
            backend: req(2)?.parse().map_err(|e: String| format_err(path, e))?,
            mse: opt(path, req(3)?)?,
            mean_iter_time: opt(path, req(4)?)?,
            n_iter_max: opt(path, req(5)?)?,
            feasible: opt(path, req(6)?)?,
            failed_steps: opt(path, req(7)?)?.unwrap_or(0),
            error: status.strip_prefix("error: ").map(str::to_string),
        });
    }
    Ok(ErrorTable { rows })
}

/// Cost after every iteration for each `(dt, backend)` cell.
pub fn write_cost_histories(path: &Path, report: &TrajoptReport) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(["dt", "backend", "iteration", "cost"]).map_err(csv_err(path))?;
    for cell in &report.cells {
        let Ok(sol) = &cell.result else { continue };
        let costs = std::iter::once(sol.initial_cost).chain(sol.cost_history.iter().copied());
        for (k, c) in costs.enumerate() {
            w.write_record([fmt_f64(cell.dt), cell.backend.as_str().into(), k.to_string(), fmt_f64(c)]).map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

/// One row per `(dt, backend)`: final cost, terminal state, convergence
/// speed and the state MSE against the finest variational solution and the
/// oracle (when given).
pub fn write_trajopt_summary(
    path: &Path,
    report: &TrajoptReport,
    oracle: Option<&ReferenceTrajectory>,
    config_hash: &str,
) -> Result<(), ExperimentError> {
    let finest = report.finest_variational().and_then(|(_, s)| trajectory_reference(&s.trajectory).ok());
    let mut w = writer(path)?;
    w.write_record([
        "dt",
        "backend",
        "horizon",
        "final_cost",
        "final_state_norm",
        "iters_to_1pct",
        "retained",
        "mse_to_finest_variational",
        "mse_to_oracle",
        "status",
        "provenance",
    ])
    .map_err(csv_err(path))?;
    for cell in &report.cells {
        let mut rec = vec![fmt_f64(cell.dt), cell.backend.as_str().into(), cell.horizon.to_string()];
        match &cell.result {
            Ok(sol) => {
                let traj = &sol.trajectory;
                let mse_f = finest.as_ref().and_then(|r| mse_on_overlap(&traj.times(), &traj.states, r).ok());
                let mse_o = oracle.and_then(|r| trajectory_mse(traj, r).ok());
                rec.extend([
                    fmt_f64(sol.final_cost()),
                    fmt_f64(traj.final_state().norm()),
                    iterations_to_within(&sol.cost_history, 0.01).to_string(),
                    sol.retained.to_string(),
                    fmt_opt(mse_f.map(fmt_f64)),
                    fmt_opt(mse_o.map(fmt_f64)),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(format!("error: {e}"));
            }
        }
        rec.push(provenance(config_hash, Some(cell.backend)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    finish(w, path)
}
