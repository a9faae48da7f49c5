//! Browser bindings for the pendulum swing-up demo.
//!
//! Every exported function returns a JSON string so the page needs no
//! generated TypeScript types. The same functions are plain Rust on native
//! targets, which is how they are tested.

use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use vilqr::config::ExperimentConfig;
use vilqr::discretize::{integrate_step, linearize_euler, linearize_variational, Backend, IntegratorConfig};
use vilqr::dynamics::Pendulum;
use vilqr::experiment::{discretization, horizon_steps, mpc_config, pendulum_setup, solver_settings};
use vilqr::ilqr::{optimize, Problem};
use vilqr::mpc::simulate_closed_loop;

#[derive(Debug, Serialize)]
pub struct Path {
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    /// One entry per interval.
    pub u: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct SwingUp {
    pub backend: &'static str,
    pub dt: f64,
    pub horizon: usize,
    pub path: Path,
    pub cost_history: Vec<f64>,
    pub final_state_norm: f64,
    pub mean_iter_time: f64,
}

#[derive(Debug, Serialize)]
pub struct ClosedLoop {
    pub backend: &'static str,
    pub dt: f64,
    pub n_iter: usize,
    pub path: Path,
    pub failed_steps: usize,
    pub diverged: bool,
    pub mean_iter_time: f64,
}

#[derive(Debug, Serialize)]
pub struct LinearizationError {
    pub dt: f64,
    pub theta: Vec<f64>,
    /// Max-abs error of `∂x⁺/∂x` against finite differences of the flow.
    pub euler: Vec<f64>,
    pub variational: Vec<f64>,
}

fn parse_backend(name: &str) -> Result<Backend, String> {
    name.parse::<Backend>().map_err(|e| e.to_string())
}

fn config(mass: f64) -> Result<ExperimentConfig, String> {
    if !(mass.is_finite() && mass > 0.0) {
        return Err(format!("mass must be positive, got {mass}"));
    }
    let mut cfg = ExperimentConfig::default();
    cfg.pendulum.mass = mass;
    cfg.pendulum.inertia = mass * cfg.pendulum.length * cfg.pendulum.length / 3.0;
    Ok(cfg)
}

fn check(dt: f64, n_iter: usize) -> Result<(), String> {
    if !(0.005..=0.1).contains(&dt) {
        return Err(format!("dt must lie in [0.005, 0.1], got {dt}"));
    }
    if !(1..=500).contains(&n_iter) {
        return Err(format!("n_iter must lie in 1..=500, got {n_iter}"));
    }
    Ok(())
}

fn path(dt: f64, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Path {
    Path {
        t: (0..states.len()).map(|k| k as f64 * dt).collect(),
        theta: states.iter().map(|x| x[0]).collect(),
        omega: states.iter().map(|x| x[1]).collect(),
        u: inputs.iter().map(|u| u[0]).collect(),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Open-loop swing-up from the hanging position over a 0.8 s horizon.
pub fn run_swing_up(backend: &str, dt: f64, n_iter: usize, mass: f64) -> Result<SwingUp, String> {
    check(dt, n_iter)?;
    let backend = parse_backend(backend)?;
    let cfg = config(mass)?;
    let (model, cost) = pendulum_setup(&cfg).map_err(|e| e.to_string())?;
    let horizon = horizon_steps(cfg.trajopt.horizon_time, dt);
    let problem = Problem::new(&model, discretization(&cfg, backend), &cost, dt);
    let x0 = DVector::from_column_slice(&cfg.x0);
    let sol =
        optimize(&problem, &x0, &vec![DVector::zeros(1); horizon], &solver_settings(&cfg, n_iter)).map_err(|e| e.to_string())?;
    Ok(SwingUp {
        backend: backend.as_str(),
        dt,
        horizon,
        path: path(dt, &sol.trajectory.states, &sol.trajectory.inputs),
        final_state_norm: sol.trajectory.final_state().norm(),
        mean_iter_time: mean(sol.iter_times.iter().copied()),
        cost_history: sol.cost_history,
    })
}

/// Receding-horizon swing-up with `n_iter` ILQR iterations per step.
pub fn run_closed_loop(backend: &str, dt: f64, n_iter: usize, sim_time: f64, mass: f64) -> Result<ClosedLoop, String> {
    check(dt, n_iter)?;
    if !(1..=20).contains(&n_iter) {
        return Err(format!("n_iter must lie in 1..=20, got {n_iter}"));
    }
    if !(sim_time > 0.0 && sim_time <= 5.0) {
        return Err(format!("sim_time must lie in (0, 5], got {sim_time}"));
    }
    let backend = parse_backend(backend)?;
    let cfg = config(mass)?;
    let (model, cost) = pendulum_setup(&cfg).map_err(|e| e.to_string())?;
    let mut mpc = mpc_config(&cfg, dt, n_iter, backend);
    mpc.sim_time = sim_time;
    let closed = simulate_closed_loop(&model, &cost, &DVector::from_column_slice(&cfg.x0), &mpc).map_err(|e| e.to_string())?;
    Ok(ClosedLoop {
        backend: backend.as_str(),
        dt,
        n_iter,
        path: path(dt, &closed.states, &closed.inputs),
        failed_steps: closed.failed_steps.len(),
        diverged: closed.terminated_early,
        mean_iter_time: closed.mean_iter_time().unwrap_or(0.0),
    })
}

/// Jacobian error of both linearizations along `θ ∈ [−π, π]` at rest with
/// zero input, against central differences of a finely resolved flow.
pub fn run_linearization_error(dt: f64, mass: f64) -> Result<LinearizationError, String> {
    check(dt, 1)?;
    let cfg = config(mass)?;
    let model = Pendulum::new(cfg.pendulum).map_err(|e| e.to_string())?;
    let fine = IntegratorConfig::new(200);
    let coarse = IntegratorConfig::new(cfg.solver.integrator_substeps);
    let u = DVector::zeros(1);
    let h = 1e-6;
    let count = 61;
    let mut out = LinearizationError { dt, theta: Vec::new(), euler: Vec::new(), variational: Vec::new() };
    for i in 0..count {
        let theta = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / (count - 1) as f64;
        let x = DVector::from_vec(vec![theta, 0.0]);
        let mut fd = nalgebra::DMatrix::zeros(2, 2);
        for j in 0..2 {
            let mut e = DVector::zeros(2);
            e[j] = h;
            let plus = integrate_step(&model, &(&x + &e), &u, dt, fine).map_err(|e| e.to_string())?;
            let minus = integrate_step(&model, &(&x - &e), &u, dt, fine).map_err(|e| e.to_string())?;
            fd.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        let euler = linearize_euler(&model, &x, &u, dt).map_err(|e| e.to_string())?;
        let ve = linearize_variational(&model, &x, &u, dt, coarse).map_err(|e| e.to_string())?;
        out.theta.push(theta);
        out.euler.push((euler.f_x - &fd).amax());
        out.variational.push((ve.f_x - &fd).amax());
    }
    Ok(out)
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, String> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
}

#[wasm_bindgen]
pub fn swing_up(backend: &str, dt: f64, n_iter: usize, mass: f64) -> Result<String, String> {
    json(run_swing_up(backend, dt, n_iter, mass))
}

#[wasm_bindgen]
pub fn closed_loop(backend: &str, dt: f64, n_iter: usize, sim_time: f64, mass: f64) -> Result<String, String> {
    json(run_closed_loop(backend, dt, n_iter, sim_time, mass))
}

#[wasm_bindgen]
pub fn linearization_error(dt: f64, mass: f64) -> Result<String, String> {
    json(run_linearization_error(dt, mass))
}

/// Pendulum mass the library uses by default.
#[wasm_bindgen]
pub fn default_mass() -> f64 {
    ExperimentConfig::default().pendulum.mass
}
