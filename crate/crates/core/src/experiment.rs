//! Pendulum experiments: open-loop trajectory optimization across timesteps
//! and backends, closed-loop MPC sweeps scored against the stable-manifold
//! oracle, and the metrics that compare them.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::discretize::{integrate_step, Backend, Discretization, IntegratorConfig};
use crate::dynamics::{ContinuousModel, ModelError, Pendulum};
use crate::ilqr::{optimize, CostModel, IlqrError, Problem, Solution, SolverSettings, Trajectory};
use crate::manifold::{extend_and_match, linear_setup, HamiltonianSystem, ManifoldError, ManifoldSolution};
use crate::mpc::{feasibility_report, simulate_closed_loop, ClosedLoopResult, MpcConfig, MpcError, TimingStatistic};
use crate::output;
use crate::reference::{mse_on_grid, mse_on_overlap, ReferenceError, ReferenceTrajectory};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("solver failed: {0}")]
    Solver(#[from] IlqrError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("oracle failed: {0}")]
    Oracle(#[from] ManifoldError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl ExperimentError {
    /// 1 for configuration problems, 2 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Model(_) => 1,
            _ => 2,
        }
    }
}

pub fn pendulum_setup(cfg: &ExperimentConfig) -> Result<(Pendulum, CostModel), ExperimentError> {
    Ok((Pendulum::new(cfg.pendulum)?, cfg.cost_model()?))
}

pub fn horizon_steps(horizon_time: f64, dt: f64) -> usize {
    (horizon_time / dt).round() as usize
}

pub fn solver_settings(cfg: &ExperimentConfig, n_iter: usize) -> SolverSettings {
    SolverSettings { n_iter, alphas: cfg.solver.alphas.clone(), mu: cfg.solver.mu, always_adopt: cfg.solver.always_adopt }
}

pub fn discretization(cfg: &ExperimentConfig, backend: Backend) -> Discretization {
    Discretization::new(backend, IntegratorConfig::new(cfg.solver.integrator_substeps))
}

/// Reference built from a discrete trajectory; the last input is held over
/// the final sample.
pub fn trajectory_reference(traj: &Trajectory) -> Result<ReferenceTrajectory, ReferenceError> {
    let mut inputs = traj.inputs.clone();
    inputs.push(traj.inputs.last().cloned().ok_or(ReferenceError::Empty)?);
    ReferenceTrajectory::new(traj.times(), traj.states.clone(), inputs)
}

/// State MSE of a discrete trajectory against a reference on the trajectory's own grid.
pub fn trajectory_mse(traj: &Trajectory, reference: &ReferenceTrajectory) -> Result<f64, ReferenceError> {
    mse_on_grid(&traj.times(), &traj.states, reference)
}

/// Continuous path obtained by replaying the inputs of `traj` under
/// zero-order hold on `model` from `traj.states[0]`, sampled `substeps`
/// times per interval.
pub fn zoh_path<M: ContinuousModel + ?Sized>(
    model: &M,
    traj: &Trajectory,
    substeps: usize,
) -> Result<ReferenceTrajectory, ExperimentError> {
    let substeps = substeps.max(1);
    let h = traj.dt / substeps as f64;
    let step = IntegratorConfig::new(1);
    let mut x = traj.states[0].clone();
    let first = traj.inputs.first().cloned().ok_or(ReferenceError::Empty)?;
    let (mut times, mut states, mut inputs) = (vec![0.0], vec![x.clone()], vec![first]);
    for (i, u) in traj.inputs.iter().enumerate() {
        for k in 1..=substeps {
            x = integrate_step(model, &x, u, h, step).map_err(IlqrError::from)?;
            times.push(i as f64 * traj.dt + k as f64 * h);
            states.push(x.clone());
            inputs.push(u.clone());
        }
    }
    Ok(ReferenceTrajectory::new(times, states, inputs)?)
}

/// State MSE between two discrete trajectories: the samples of the coarser
/// one against the continuous path the finer one's inputs produce on
/// `model`, over the window both cover.
pub fn pairwise_mse<M: ContinuousModel + ?Sized>(model: &M, a: &Trajectory, b: &Trajectory) -> Result<f64, ExperimentError> {
    let (coarse, fine) = if a.dt >= b.dt { (a, b) } else { (b, a) };
    let path = zoh_path(model, fine, PAIRWISE_SUBSTEPS)?;
    Ok(mse_on_overlap(&coarse.times(), &coarse.states, &path)?)
}

/// Path samples per interval of the finer trajectory in [`pairwise_mse`].
pub const PAIRWISE_SUBSTEPS: usize = 20;

/// Number of iterations after which the cost stays within `(1 + frac)` of
/// the final cost.
pub fn iterations_to_within(history: &[f64], frac: f64) -> usize {
    let Some(&last) = history.last() else {
        return 0;
    };
    let bound = last * (1.0 + frac);
    history.iter().rposition(|&c| c > bound).map_or(1, |i| i + 2).min(history.len())
}

/// Continuous-time cost `∫ xᵀQx + uᵀRu dt` of applying the inputs of `traj`
/// under zero-order hold to the continuous model from `traj.states[0]`,
/// plus `x_Nᵀ P x_N` for the remaining infinite horizon. Each interval is
/// integrated with `substeps` RK4 steps and the trapezoidal rule.
pub fn zoh_continuous_cost<M: ContinuousModel + ?Sized>(
    model: &M,
    cost: &CostModel,
    traj: &Trajectory,
    substeps: usize,
    tail: &DMatrix<f64>,
) -> Result<f64, ExperimentError> {
    let h = traj.dt / substeps as f64;
    let step = IntegratorConfig::new(1);
    let mut x = traj.states[0].clone();
    let mut total = 0.0;
    for u in &traj.inputs {
        let mut l0 = cost.running(&x, u);
        for _ in 0..substeps {
            x = integrate_step(model, &x, u, h, step).map_err(IlqrError::from)?;
            let l1 = cost.running(&x, u);
            total += 0.5 * h * (l0 + l1);
            l0 = l1;
        }
    }
    Ok(total + x.dot(&(tail * &x)))
}

#[derive(Debug, Clone)]
pub struct TrajoptCell {
    pub dt: f64,
    pub backend: Backend,
    pub horizon: usize,
    pub result: Result<Solution, IlqrError>,
}

#[derive(Debug, Clone)]
pub struct TrajoptReport {
    pub cells: Vec<TrajoptCell>,
}

impl TrajoptReport {
    pub fn solution(&self, dt: f64, backend: Backend) -> Option<&Solution> {
        self.cells.iter().find(|c| c.backend == backend && (c.dt - dt).abs() < 1e-12).and_then(|c| c.result.as_ref().ok())
    }

    /// Converged trajectory of the finest timestep with the variational
    /// backend, used as the common reference.
    pub fn finest_variational(&self) -> Option<(f64, &Solution)> {
        self.cells
            .iter()
            .filter(|c| c.backend == Backend::Variational)
            .filter_map(|c| c.result.as_ref().ok().map(|s| (c.dt, s)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Optimizes the swing-up from `x0` with `U ≡ 0` for every timestep and
/// backend. The horizon is `round(T / dt)`. Solver failures are recorded per
/// cell.
pub fn run_trajopt_experiment(cfg: &ExperimentConfig) -> Result<TrajoptReport, ExperimentError> {
    let (model, cost) = pendulum_setup(cfg)?;
    let x0 = DVector::from_column_slice(&cfg.x0);
    let settings = solver_settings(cfg, cfg.trajopt.n_iter);
    let cell_keys: Vec<(f64, Backend)> =
        cfg.trajopt.dt_list.iter().flat_map(|&dt| cfg.backends.iter().map(move |&b| (dt, b))).collect();
    let cells = in_pool(cfg.workers, || {
        cell_keys
            .par_iter()
            .map(|&(dt, backend)| {
                let horizon = horizon_steps(cfg.trajopt.horizon_time, dt);
                let problem = Problem::new(&model, discretization(cfg, backend), &cost, dt);
                let u_init = vec![DVector::zeros(1); horizon];
                let result = optimize(&problem, &x0, &u_init, &settings);
                TrajoptCell { dt, backend, horizon, result }
            })
            .collect()
    })?;
    Ok(TrajoptReport { cells })
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Solves the infinite-horizon problem from `x0` on the stable manifold.
pub fn compute_oracle(cfg: &ExperimentConfig) -> Result<ManifoldSolution, ExperimentError> {
    let (model, _) = pendulum_setup(cfg)?;
    let sys = hamiltonian(cfg, &model)?;
    Ok(extend_and_match(&sys, &DVector::from_column_slice(&cfg.x0), &cfg.match_settings())?)
}

pub fn hamiltonian<'a>(cfg: &ExperimentConfig, model: &'a Pendulum) -> Result<HamiltonianSystem<'a, Pendulum>, ExperimentError> {
    Ok(HamiltonianSystem::new(
        model,
        DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.state_weight)),
        DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.input_weight)),
    )?)
}

/// Stabilizing Riccati solution of the problem linearized at the origin;
/// `xᵀΓx` approximates the optimal cost-to-go near the upright position.
pub fn riccati_tail(cfg: &ExperimentConfig) -> Result<DMatrix<f64>, ExperimentError> {
    let (model, _) = pendulum_setup(cfg)?;
    Ok(linear_setup(&hamiltonian(cfg, &model)?)?.gamma)
}

pub fn oracle_cache_path(cfg: &ExperimentConfig, default_dir: &Path) -> PathBuf {
    cfg.oracle.cache_dir.as_deref().unwrap_or(default_dir).join(format!("oracle-{}.csv", cfg.oracle_hash()))
}

/// The oracle resampled onto the configured uniform grid, read from the
/// cache when present and written to it otherwise. Fresh and cached results
/// are identical because the cache stores the resampled values exactly.
pub fn load_or_compute_oracle(cfg: &ExperimentConfig, default_dir: &Path) -> Result<ReferenceTrajectory, ExperimentError> {
    let path = oracle_cache_path(cfg, default_dir);
    if path.exists() {
        return output::read_trajectory(&path);
    }
    let solution = compute_oracle(cfg)?;
    let reference = solution.resample(cfg.oracle.resample_step);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    }
    output::write_reference(&path, &reference)?;
    Ok(reference)
}

/// Closed-loop MSE to the oracle: the reference is interpolated onto the
/// closed-loop grid and the squared error is averaged over all samples and
/// state components.
pub fn mse_to_reference(closed: &ClosedLoopResult, oracle: &ReferenceTrajectory) -> Result<f64, ReferenceError> {
    mse_on_grid(&closed.times(), &closed.states, oracle)
}

pub fn mpc_config(cfg: &ExperimentConfig, dt: f64, n_iter: usize, backend: Backend) -> MpcConfig {
    MpcConfig {
        dt,
        horizon_time: cfg.mpc.horizon_time,
        n_iter,
        sim_time: cfg.mpc.sim_time,
        backend,
        plant_substeps: cfg.mpc.plant_substeps,
        integrator: IntegratorConfig::new(cfg.solver.integrator_substeps),
        alphas: cfg.solver.alphas.clone(),
        mu: cfg.solver.mu,
    }
}

pub fn run_closed_loop(
    cfg: &ExperimentConfig,
    dt: f64,
    n_iter: usize,
    backend: Backend,
) -> Result<ClosedLoopResult, ExperimentError> {
    let (model, cost) = pendulum_setup(cfg)?;
    let x0 = DVector::from_column_slice(&cfg.x0);
    Ok(simulate_closed_loop(&model, &cost, &x0, &mpc_config(cfg, dt, n_iter, backend))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub dt: f64,
    pub n_iter: usize,
    pub backend: Backend,
    pub mse: Option<f64>,
    /// Mean wall-clock time of one ILQR iteration.
    pub mean_iter_time: Option<f64>,
    pub n_iter_max: Option<usize>,
    pub feasible: Option<bool>,
    /// Plant steps on which the solver failed and the warm start was applied.
    pub failed_steps: usize,
    /// `None` for a completed cell, otherwise the error.
    pub error: Option<String>,
}

/// Closed-loop error for every `(dt, n_iter, backend)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn get(&self, dt: f64, n_iter: usize, backend: Backend) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.n_iter == n_iter && r.backend == backend && (r.dt - dt).abs() < 1e-12)
    }

    pub fn mse(&self, dt: f64, n_iter: usize, backend: Backend) -> Option<f64> {
        self.get(dt, n_iter, backend).and_then(|r| r.mse)
    }
}

fn sweep_cell(cfg: &ExperimentConfig, reference: &ReferenceTrajectory, dt: f64, n_iter: usize, backend: Backend) -> ErrorRow {
    let mut row = ErrorRow {
        dt,
        n_iter,
        backend,
        mse: None,
        mean_iter_time: None,
        n_iter_max: None,
        feasible: None,
        failed_steps: 0,
        error: None,
    };
    let closed = match run_closed_loop(cfg, dt, n_iter, backend) {
        Ok(c) => c,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.failed_steps = closed.failed_steps.len();
    if let Some(report) = feasibility_report(&closed, dt, TimingStatistic::Mean) {
        row.mean_iter_time = Some(report.iter_time);
        row.n_iter_max = Some(report.n_iter_max);
        row.feasible = Some(report.feasible(n_iter));
    }
    if closed.terminated_early {
        row.error = Some(format!("plant diverged after {} steps", closed.inputs.len()));
        return row;
    }
    match mse_to_reference(&closed, reference) {
        Ok(mse) => row.mse = Some(mse),
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every closed-loop cell against the oracle reference. Cells execute
/// on `cfg.workers` threads; the row order is always dt, then n_iter, then
/// backend, independent of scheduling.
pub fn run_mpc_sweep(cfg: &ExperimentConfig, reference: &ReferenceTrajectory) -> Result<ErrorTable, ExperimentError> {
    let mut cells = Vec::new();
    for &dt in &cfg.mpc.dt_list {
        for &n in &cfg.mpc.n_iter_list {
            for &b in &cfg.backends {
                cells.push((dt, n, b));
            }
        }
    }
    let rows = in_pool(cfg.workers, || cells.par_iter().map(|&(dt, n, b)| sweep_cell(cfg, reference, dt, n, b)).collect())?;
    Ok(ErrorTable { rows })
}
