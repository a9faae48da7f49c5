use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vilqr::config::ExperimentConfig;
use vilqr::discretize::Backend;
use vilqr::experiment::{self, ExperimentError};
use vilqr::mpc::{feasibility_report, TimingStatistic};
use vilqr::output::{self, fmt_f64};

/// ILQR trajectory optimization and MPC experiments on the pendulum
/// swing-up, scored against the stable-manifold optimal trajectory.
#[derive(Parser, Debug)]
#[command(name = "vilqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (file for `oracle`).
    #[arg(long)]
    out: PathBuf,
    /// Run a single backend instead of `backend_list`.
    #[arg(long)]
    backend: Option<Backend>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Open-loop swing-up for every timestep and backend.
    Trajopt(Common),
    /// One closed-loop simulation per backend at `mpc.dt`, `mpc.n_iter`.
    Mpc(Common),
    /// Optimal trajectory from the stable manifold, written as CSV.
    Oracle(Common),
    /// Closed-loop error table over `mpc.dt_list` × `mpc.n_iter_list`.
    Sweep(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    Ok(match common.backend {
        Some(b) => cfg.with_backend(b),
        None => cfg,
    })
}

fn out_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Result of a command that completed but had solver failures.
struct Failures(usize);

fn trajopt(common: &Common) -> Result<Failures, ExperimentError> {
    let cfg = load(common)?;
    out_dir(&common.out)?;
    let report = experiment::run_trajopt_experiment(&cfg)?;
    let oracle = match experiment::load_or_compute_oracle(&cfg, &common.out) {
        Ok(r) => Some(r),
        Err(e) => {
            eprintln!("oracle unavailable, skipping oracle error: {e}");
            None
        }
    };
    let mut failures = 0;
    for cell in &report.cells {
        match &cell.result {
            Ok(sol) => {
                let name = format!("trajectory_{}_dt{}.csv", cell.backend, cell.dt);
                output::write_trajectory(&common.out.join(name), &sol.trajectory)?;
                println!(
                    "{:<11} dt={:<5} N={:<3} cost={:.6e} |x_N|={:.3e}",
                    cell.backend.as_str(),
                    cell.dt,
                    cell.horizon,
                    sol.final_cost(),
                    sol.trajectory.final_state().norm()
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{} dt={}: {e}", cell.backend, cell.dt);
            }
        }
    }
    output::write_cost_histories(&common.out.join("cost_history.csv"), &report)?;
    output::write_trajopt_summary(&common.out.join("summary.csv"), &report, oracle.as_ref(), &cfg.hash())?;
    Ok(Failures(failures))
}

fn mpc(common: &Common) -> Result<Failures, ExperimentError> {
    let cfg = load(common)?;
    out_dir(&common.out)?;
    let reference = experiment::load_or_compute_oracle(&cfg, &common.out)?;
    let path = common.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| ExperimentError::Csv { path: path.clone(), source })?;
    let csv_err = |source| ExperimentError::Csv { path: path.clone(), source };
    w.write_record(["dt", "n_iter", "backend", "mse", "mean_iter_time", "n_iter_max", "feasible", "failed_steps", "provenance"])
        .map_err(csv_err)?;
    let mut failures = 0;
    for &backend in &cfg.backends {
        let closed = experiment::run_closed_loop(&cfg, cfg.mpc.dt, cfg.mpc.n_iter, backend)?;
        output::write_closed_loop(&common.out.join(format!("closed_loop_{backend}.csv")), &closed)?;
        let mse = experiment::mse_to_reference(&closed, &reference)?;
        let feas = feasibility_report(&closed, cfg.mpc.dt, TimingStatistic::Mean);
        if closed.terminated_early || !closed.failed_steps.is_empty() {
            failures += 1;
            eprintln!("{backend}: {} failed solves, plant diverged: {}", closed.failed_steps.len(), closed.terminated_early);
        }
        println!(
            "{:<11} dt={} n_iter={} mse={mse:.4e} feasible={}",
            backend.as_str(),
            cfg.mpc.dt,
            cfg.mpc.n_iter,
            feas.as_ref().map_or("n/a".into(), |f| f.feasible(cfg.mpc.n_iter).to_string())
        );
        w.write_record([
            fmt_f64(cfg.mpc.dt),
            cfg.mpc.n_iter.to_string(),
            backend.to_string(),
            fmt_f64(mse),
            feas.as_ref().map_or(String::new(), |f| fmt_f64(f.iter_time)),
            feas.as_ref().map_or(String::new(), |f| f.n_iter_max.to_string()),
            feas.as_ref().map_or(String::new(), |f| f.feasible(cfg.mpc.n_iter).to_string()),
            closed.failed_steps.len().to_string(),
            output::provenance(&cfg.hash(), Some(backend)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    Ok(Failures(failures))
}

fn oracle(common: &Common) -> Result<Failures, ExperimentError> {
    let cfg = load(common)?;
    let (model, _) = experiment::pendulum_setup(&cfg)?;
    let sys = experiment::hamiltonian(&cfg, &model)?;
    let solution = experiment::compute_oracle(&cfg)?;
    if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    output::write_reference(&common.out, &solution.resample(cfg.oracle.resample_step))?;
    let (xn, ln) = solution.final_norms();
    println!(
        "cost={:.6e} backward_time={:.4} max|H|={:.2e} canonical_residual={:.2e} |x_end|={:.1e} |lambda_end|={:.1e}",
        solution.cost(&sys),
        solution.backward_time,
        solution.max_hjb_residual(&sys),
        solution.max_canonical_residual(&sys),
        xn,
        ln
    );
    Ok(Failures(0))
}

fn sweep(common: &Common) -> Result<Failures, ExperimentError> {
    let cfg = load(common)?;
    out_dir(&common.out)?;
    let reference = experiment::load_or_compute_oracle(&cfg, &common.out)?;
    let table = experiment::run_mpc_sweep(&cfg, &reference)?;
    output::write_error_table(&common.out.join("error_table.csv"), &table, &cfg.hash())?;
    for row in &table.rows {
        match (&row.mse, &row.error) {
            (Some(mse), None) => println!("{:<11} dt={:<5} n_iter={} mse={mse:.4e}", row.backend.as_str(), row.dt, row.n_iter),
            (_, err) => println!(
                "{:<11} dt={:<5} n_iter={} error: {}",
                row.backend.as_str(),
                row.dt,
                row.n_iter,
                err.as_deref().unwrap_or("?")
            ),
        }
    }
    // failed cells are reported in the table, not through the exit code
    Ok(Failures(0))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Trajopt(c) => trajopt(c),
        Command::Mpc(c) => mpc(c),
        Command::Oracle(c) => oracle(c),
        Command::Sweep(c) => sweep(c),
    };
    match result {
        Ok(Failures(0)) => ExitCode::SUCCESS,
        Ok(Failures(n)) => {
            eprintln!("error: {n} run(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
