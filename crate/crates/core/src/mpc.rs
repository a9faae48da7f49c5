//! Receding-horizon control with a warm-started, fixed-budget ILQR solve at
//! every plant step.

use nalgebra::DVector;
use thiserror::Error;

use crate::discretize::{integrate_step, Backend, Discretization, IntegratorConfig};
use crate::dynamics::ContinuousModel;
use crate::ilqr::{optimize, CostModel, IlqrError, Problem, SolverSettings, DEFAULT_ALPHAS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(String),
    #[error("warm start has {got} inputs, horizon is {expected}")]
    WarmStartLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Control and discretization timestep.
    pub dt: f64,
    /// Prediction interval `T`; the horizon is `round(T / dt)` steps.
    pub horizon_time: f64,
    /// ILQR iterations per plant step.
    pub n_iter: usize,
    pub sim_time: f64,
    pub backend: Backend,
    /// RK4 substeps per `dt` for the simulated plant.
    pub plant_substeps: usize,
    /// Controller-side integrator (used by the variational backend).
    pub integrator: IntegratorConfig,
    pub alphas: Vec<f64>,
    pub mu: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            horizon_time: 0.4,
            n_iter: 5,
            sim_time: 2.0,
            backend: Backend::Variational,
            plant_substeps: 10,
            integrator: IntegratorConfig::new(4),
            alphas: DEFAULT_ALPHAS.to_vec(),
            mu: 0.0,
        }
    }
}

impl MpcConfig {
    pub fn horizon(&self) -> usize {
        (self.horizon_time / self.dt).round() as usize
    }

    pub fn sim_steps(&self) -> usize {
        (self.sim_time / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |msg: String| Err(MpcError::InvalidConfig(msg));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon() < 1 {
            return bad(format!("horizon_time {} gives an empty horizon at dt {}", self.horizon_time, self.dt));
        }
        if self.n_iter < 1 {
            return bad("n_iter must be at least 1".into());
        }
        if !(self.sim_time.is_finite() && self.sim_time >= 0.0) {
            return bad(format!("sim_time must be nonnegative, got {}", self.sim_time));
        }
        if self.plant_substeps < 1 {
            return bad("plant_substeps must be at least 1".into());
        }
        self.solver_settings().validate().map_err(|e| MpcError::InvalidConfig(e.to_string()))
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings { n_iter: self.n_iter, alphas: self.alphas.clone(), mu: self.mu, always_adopt: false }
    }

    pub fn discretization(&self) -> Discretization {
        Discretization::new(self.backend, self.integrator)
    }
}

/// Drops the first input and repeats the last one, keeping the length.
pub fn shift_warm_start(inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    match inputs {
        [] => Vec::new(),
        [only] => vec![only.clone()],
        [_, rest @ ..] => {
            let mut out = rest.to_vec();
            out.push(rest[rest.len() - 1].clone());
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Wall-clock seconds of each ILQR iteration at this step.
    pub iter_times: Vec<f64>,
    /// Predicted cost of the optimized sequence (NaN on failure).
    pub predicted_cost: f64,
    /// The solver failed and the warm start was applied unmodified.
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct MpcStep {
    pub u_applied: DVector<f64>,
    pub next_warm_start: Vec<DVector<f64>>,
    pub record: StepRecord,
}

/// One receding-horizon update from the measured state `x_k`.
pub fn mpc_step<M: ContinuousModel + ?Sized>(
    model: &M,
    cost: &CostModel,
    x_k: &DVector<f64>,
    warm_start: &[DVector<f64>],
    config: &MpcConfig,
) -> Result<MpcStep, MpcError> {
    config.validate()?;
    let horizon = config.horizon();
    if warm_start.len() != horizon {
        return Err(MpcError::WarmStartLength { expected: horizon, got: warm_start.len() });
    }
    let problem = Problem::new(model, config.discretization(), cost, config.dt);
    match optimize(&problem, x_k, warm_start, &config.solver_settings()) {
        Ok(sol) => {
            let u = sol.trajectory.inputs[0].clone();
            Ok(MpcStep {
                u_applied: u,
                next_warm_start: shift_warm_start(&sol.trajectory.inputs),
                record: StepRecord { predicted_cost: sol.final_cost(), iter_times: sol.iter_times, failed: false },
            })
        }
        Err(err) => {
            debug_assert!(!matches!(err, IlqrError::InvalidSettings(_)));
            Ok(MpcStep {
                u_applied: warm_start[0].clone(),
                next_warm_start: shift_warm_start(warm_start),
                record: StepRecord { iter_times: Vec::new(), predicted_cost: f64::NAN, failed: true },
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Per plant step, the wall-clock time of every ILQR iteration.
    pub iter_times: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub failed_steps: Vec<usize>,
    /// The plant blew up and the simulation stopped early.
    pub terminated_early: bool,
}

impl ClosedLoopResult {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn all_iter_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.iter_times.iter().flatten().copied()
    }

    pub fn mean_iter_time(&self) -> Option<f64> {
        let (sum, n) = self.all_iter_times().fold((0.0, 0usize), |(s, n), t| (s + t, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Advances the true plant (continuous model, RK4) under held inputs.
pub fn plant_step<M: ContinuousModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> Option<DVector<f64>> {
    integrate_step(model, x, u, dt, IntegratorConfig::new(substeps)).ok()
}

/// Closed-loop simulation with exact state feedback and no computational
/// delay. The warm start is initialized to zeros.
pub fn simulate_closed_loop<M: ContinuousModel + ?Sized>(
    model: &M,
    cost: &CostModel,
    x0: &DVector<f64>,
    config: &MpcConfig,
) -> Result<ClosedLoopResult, MpcError> {
    config.validate()?;
    let steps = config.sim_steps();
    let mut warm = vec![DVector::zeros(model.input_dim()); config.horizon()];
    let mut result = ClosedLoopResult {
        dt: config.dt,
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(steps),
        iter_times: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
        failed_steps: Vec::new(),
        terminated_early: false,
    };
    for k in 0..steps {
        let x = result.states[k].clone();
        let step = mpc_step(model, cost, &x, &warm, config)?;
        if step.record.failed {
            result.failed_steps.push(k);
        }
        let Some(next) = plant_step(model, &x, &step.u_applied, config.dt, config.plant_substeps) else {
            result.terminated_early = true;
            break;
        };
        result.inputs.push(step.u_applied);
        result.iter_times.push(step.record.iter_times);
        result.costs.push(step.record.predicted_cost);
        result.states.push(next);
        warm = step.next_warm_start;
    }
    Ok(result)
}

/// Which per-iteration statistic decides real-time feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimingStatistic {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub dt: f64,
    pub iter_time: f64,
    /// Largest iteration count with `n · iter_time ≤ dt`.
    pub n_iter_max: usize,
}

impl FeasibilityReport {
    pub fn new(iter_time: f64, dt: f64) -> Self {
        let mut n = if iter_time > 0.0 { (dt / iter_time).floor().max(0.0) as usize } else { usize::MAX };
        if iter_time > 0.0 {
            while n > 0 && n as f64 * iter_time > dt {
                n -= 1;
            }
            while (n + 1) as f64 * iter_time <= dt {
                n += 1;
            }
        }
        Self { dt, iter_time, n_iter_max: n }
    }

    pub fn feasible(&self, n_iter: usize) -> bool {
        n_iter as f64 * self.iter_time <= self.dt
    }

    pub fn rows(&self, n_iters: &[usize]) -> Vec<(usize, bool)> {
        n_iters.iter().map(|&n| (n, self.feasible(n))).collect()
    }
}

/// Feasibility of running `n` ILQR iterations within one control period.
/// Returns `None` when no iteration time was recorded.
pub fn feasibility_report(result: &ClosedLoopResult, dt: f64, stat: TimingStatistic) -> Option<FeasibilityReport> {
    let t = match stat {
        TimingStatistic::Mean => result.mean_iter_time()?,
        TimingStatistic::Max => result.all_iter_times().reduce(f64::max)?,
    };
    Some(FeasibilityReport::new(t, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Pendulum, PendulumParams};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn seq(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| v(&[x])).collect()
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift_warm_start(&seq(&[1.0, 2.0, 3.0, 4.0])), seq(&[2.0, 3.0, 4.0, 4.0]));
        assert_eq!(shift_warm_start(&seq(&[7.0])), seq(&[7.0]));
        assert_eq!(shift_warm_start(&seq(&[0.0; 5])), seq(&[0.0; 5]));
    }

    proptest! {
        #[test]
        fn shift_preserves_length(xs in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let s = shift_warm_start(&seq(&xs));
            prop_assert_eq!(s.len(), xs.len());
            for i in 0..xs.len() - 1 {
                prop_assert_eq!(s[i][0], xs[(i + 1).min(xs.len() - 1)]);
            }
        }
    }

    #[test]
    fn feasibility_rule() {
        let r = FeasibilityReport::new(0.005, 0.02);
        assert_eq!(r.n_iter_max, 4);
        assert!(r.feasible(4));
        assert!(!r.feasible(5));

        let r = FeasibilityReport::new(0.03, 0.02);
        assert_eq!(r.n_iter_max, 0);
        assert!(!r.feasible(1));

        let r = FeasibilityReport::new(0.01, 0.02);
        assert!(r.feasible(2));
        assert_eq!(r.rows(&[1, 2, 3]), vec![(1, true), (2, true), (3, false)]);
    }

    #[test]
    fn config_validation() {
        let mut c = MpcConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.horizon(), 20);
        assert_eq!(c.sim_steps(), 100);
        c.n_iter = 0;
        assert!(c.validate().is_err());
        c = MpcConfig { horizon_time: 0.001, ..MpcConfig::default() };
        assert!(c.validate().is_err());
        c = MpcConfig { dt: 0.0, ..MpcConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn origin_stays_at_origin() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let cost = CostModel::diagonal(&[2.0, 0.01], &[2.0], &[2.0, 0.01]).unwrap();
        let cfg = MpcConfig { sim_time: 0.2, n_iter: 2, ..MpcConfig::default() };
        let step = mpc_step(&p, &cost, &v(&[0.0, 0.0]), &seq(&[0.0; 20]), &cfg).unwrap();
        assert_eq!(step.u_applied, v(&[0.0]));
        let res = simulate_closed_loop(&p, &cost, &v(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(res.states.len(), 11);
        assert!(res.states.iter().all(|x| x.amax() == 0.0));
        assert!(res.inputs.iter().all(|u| u.amax() == 0.0));
        assert!(res.iter_times.iter().all(|t| t.len() == 2 && t.iter().all(|&s| s >= 0.0)));
    }

    #[test]
    fn warm_start_length_checked() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let cost = CostModel::diagonal(&[2.0, 0.01], &[2.0], &[2.0, 0.01]).unwrap();
        let err = mpc_step(&p, &cost, &v(&[0.0, 0.0]), &seq(&[0.0; 3]), &MpcConfig::default()).unwrap_err();
        assert_eq!(err, MpcError::WarmStartLength { expected: 20, got: 3 });
    }

    #[test]
    fn zero_cost_leaves_pendulum_free() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let cost = CostModel::diagonal(&[0.0, 0.0], &[2.0], &[0.0, 0.0]).unwrap();
        let cfg = MpcConfig { sim_time: 0.5, n_iter: 2, ..MpcConfig::default() };
        let x0 = v(&[-2.5, 0.0]);
        let res = simulate_closed_loop(&p, &cost, &x0, &cfg).unwrap();
        assert!(res.inputs.iter().all(|u| u[0] == 0.0));
        let mut x = x0.clone();
        for k in 0..cfg.sim_steps() {
            x = plant_step(&p, &x, &v(&[0.0]), cfg.dt, cfg.plant_substeps).unwrap();
            assert_eq!(x, res.states[k + 1]);
        }
    }

    #[test]
    fn swing_up_closed_loop_reaches_upright() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let cost = CostModel::diagonal(&[2.0, 0.01], &[2.0], &[2.0, 0.01]).unwrap();
        let cfg = MpcConfig { dt: 0.02, n_iter: 5, sim_time: 2.0, ..MpcConfig::default() };
        let res = simulate_closed_loop(&p, &cost, &v(&[-std::f64::consts::PI, 0.0]), &cfg).unwrap();
        assert!(!res.terminated_early);
        assert!(res.failed_steps.is_empty());
        assert!(res.states.last().unwrap().norm() < 0.05, "final {}", res.states.last().unwrap());
        let report = feasibility_report(&res, cfg.dt, TimingStatistic::Mean).unwrap();
        assert!(report.iter_time > 0.0);
        let max = feasibility_report(&res, cfg.dt, TimingStatistic::Max).unwrap();
        assert!(max.iter_time >= report.iter_time);
    }
}
