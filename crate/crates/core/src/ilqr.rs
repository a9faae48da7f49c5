//! Iterative LQR: quadratic costs, the backward Riccati-like recursion, the
//! line-searched forward pass and the fixed-budget optimization loop.
//!
//! The Gauss-Newton variant is used throughout: second derivatives of the
//! dynamics never enter the `Q` expansion, only `f_x` and `f_u` from the
//! active [`Discretization`].

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
// std has no clock on wasm32-unknown-unknown
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::discretize::{Discretization, DiscretizeError, StepLinearization};
use crate::dynamics::ContinuousModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IlqrError {
    #[error("regularized Q_uu is not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },
    #[error("line-search parameter must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

/// Quadratic running cost `xᵀQ_s x + uᵀR u` and terminal cost `xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub state_weight: DMatrix<f64>,
    pub input_weight: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
}

fn symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

impl CostModel {
    pub fn new(state_weight: DMatrix<f64>, input_weight: DMatrix<f64>, terminal_weight: DMatrix<f64>) -> Result<Self, IlqrError> {
        let n = state_weight.nrows();
        for (name, w) in [("Q_s", &state_weight), ("Q_f", &terminal_weight)] {
            if w.nrows() != n || !symmetric(w) {
                return Err(IlqrError::InvalidCost(format!("{name} must be symmetric {n}x{n}")));
            }
            if min_eigenvalue(w) < -1e-12 {
                return Err(IlqrError::InvalidCost(format!("{name} must be positive semidefinite")));
            }
        }
        if !symmetric(&input_weight) || input_weight.nrows() == 0 || min_eigenvalue(&input_weight) <= 0.0 {
            return Err(IlqrError::InvalidCost("R must be symmetric positive definite".into()));
        }
        Ok(Self { state_weight, input_weight, terminal_weight })
    }

    pub fn diagonal(state: &[f64], input: &[f64], terminal: &[f64]) -> Result<Self, IlqrError> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(state)),
            DMatrix::from_diagonal(&DVector::from_column_slice(input)),
            DMatrix::from_diagonal(&DVector::from_column_slice(terminal)),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_weight.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weight.nrows()
    }

    pub fn running(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.state_weight * x)) + u.dot(&(&self.input_weight * u))
    }

    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.terminal_weight * x))
    }
}

/// State sequence of length `N + 1` paired with an input sequence of length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| i as f64 * self.dt).collect()
    }

    pub fn is_well_formed(&self) -> bool {
        self.states.len() == self.inputs.len() + 1
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Discrete cost `Σ l(x_i, u_i) + l_f(x_N)` with no timestep weighting.
pub fn evaluate_cost(traj: &Trajectory, cost: &CostModel) -> f64 {
    let running: f64 = traj.states.iter().zip(&traj.inputs).map(|(x, u)| cost.running(x, u)).sum();
    running + cost.terminal(traj.final_state())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives {
    pub l_x: DVector<f64>,
    pub l_u: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_uu: DMatrix<f64>,
    pub l_ux: DMatrix<f64>,
}

pub fn cost_derivatives(x: &DVector<f64>, u: &DVector<f64>, cost: &CostModel) -> CostDerivatives {
    CostDerivatives {
        l_x: &cost.state_weight * x * 2.0,
        l_u: &cost.input_weight * u * 2.0,
        l_xx: &cost.state_weight * 2.0,
        l_uu: &cost.input_weight * 2.0,
        l_ux: DMatrix::zeros(u.len(), x.len()),
    }
}

/// Local value-function expansion `(V_x, V_xx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueExpansion {
    pub v_x: DVector<f64>,
    pub v_xx: DMatrix<f64>,
}

/// Boundary condition of the recursion: derivatives of `l_f` at `x̄_N`.
pub fn terminal_expansion(x: &DVector<f64>, cost: &CostModel) -> ValueExpansion {
    ValueExpansion { v_x: &cost.terminal_weight * x * 2.0, v_xx: &cost.terminal_weight * 2.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QExpansion {
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
    pub q_ux: DMatrix<f64>,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Gauss-Newton `Q` coefficients at one step given the expansion at `i + 1`.
pub fn q_expansion(lin: &StepLinearization, d: &CostDerivatives, next: &ValueExpansion) -> QExpansion {
    let fx_t = lin.f_x.transpose();
    let fu_t = lin.f_u.transpose();
    let vxx_fx = &next.v_xx * &lin.f_x;
    QExpansion {
        q_x: &d.l_x + &fx_t * &next.v_x,
        q_u: &d.l_u + &fu_t * &next.v_x,
        q_xx: symmetrize(&d.l_xx + &fx_t * &vxx_fx),
        q_uu: symmetrize(&d.l_uu + &fu_t * &next.v_xx * &lin.f_u),
        q_ux: &d.l_ux + &fu_t * &vxx_fx,
    }
}

/// Feedforward `d(i)` and feedback `K(i)` terms for every step.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.feedforward.len()
    }

    pub fn zeros(horizon: usize, n: usize, m: usize) -> Self {
        Self { feedforward: vec![DVector::zeros(m); horizon], feedback: vec![DMatrix::zeros(m, n); horizon] }
    }
}

/// Runs the recursion from `N − 1` down to `0`.
///
/// Returns the gains and the value expansions `V(0..=N)`; the last entry is
/// `terminal`. `Q_uu + μI` is factored with Cholesky, and a failed
/// factorization is reported with the offending step.
pub fn backward_pass(
    lins: &[StepLinearization],
    derivs: &[CostDerivatives],
    terminal: &ValueExpansion,
    mu: f64,
) -> Result<(GainSchedule, Vec<ValueExpansion>), IlqrError> {
    let horizon = lins.len();
    if derivs.len() != horizon {
        return Err(IlqrError::HorizonMismatch(format!("{} linearizations but {} cost expansions", horizon, derivs.len())));
    }
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let mut feedback = vec![DMatrix::zeros(0, 0); horizon];
    let mut values = vec![terminal.clone(); horizon + 1];

    for i in (0..horizon).rev() {
        let q = q_expansion(&lins[i], &derivs[i], &values[i + 1]);
        let m = q.q_uu.nrows();
        let q_uu_reg = &q.q_uu + DMatrix::identity(m, m) * mu;
        let chol = q_uu_reg.cholesky().ok_or(IlqrError::NotPositiveDefinite { step: i })?;
        let d = -chol.solve(&q.q_u);
        let k = -chol.solve(&q.q_ux);
        let q_xu = q.q_ux.transpose();
        values[i] = ValueExpansion { v_x: &q.q_x + &q_xu * &d, v_xx: symmetrize(&q.q_xx + &q_xu * &k) };
        feedforward[i] = d;
        feedback[i] = k;
    }
    Ok((GainSchedule { feedforward, feedback }, values))
}

/// Simulates `inputs` from `x0` through the discrete dynamics.
pub fn rollout<M: ContinuousModel + ?Sized>(
    model: &M,
    scheme: &Discretization,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    dt: f64,
) -> Result<Trajectory, DiscretizeError> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = scheme.step(model, states.last().unwrap(), u, dt)?;
        states.push(next);
    }
    Ok(Trajectory { states, inputs: inputs.to_vec(), dt })
}

/// `û_i = ū_i + K(i)(x̂_i − x̄_i) + α d(i)`, `x̂_{i+1} = f(x̂_i, û_i)`.
pub fn forward_pass<M: ContinuousModel + ?Sized>(
    model: &M,
    scheme: &Discretization,
    nominal: &Trajectory,
    gains: &GainSchedule,
    alpha: f64,
    x0: &DVector<f64>,
) -> Result<Trajectory, IlqrError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(IlqrError::InvalidAlpha(alpha));
    }
    if gains.horizon() != nominal.horizon() || gains.feedback.len() != nominal.horizon() {
        return Err(IlqrError::HorizonMismatch(format!(
            "gains cover {} steps, nominal has {}",
            gains.horizon(),
            nominal.horizon()
        )));
    }
    let horizon = nominal.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for i in 0..horizon {
        let x = &states[i];
        let dx = x - &nominal.states[i];
        let u = &nominal.inputs[i] + &gains.feedback[i] * dx + &gains.feedforward[i] * alpha;
        let next = scheme.step(model, x, &u, nominal.dt)?;
        inputs.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, inputs, dt: nominal.dt })
}

/// Line-search set used when none is configured.
pub const DEFAULT_ALPHAS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub n_iter: usize,
    pub alphas: Vec<f64>,
    pub mu: f64,
    /// Adopt the best line-search candidate even when it raises the cost.
    pub always_adopt: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { n_iter: 200, alphas: DEFAULT_ALPHAS.to_vec(), mu: 0.0, always_adopt: false }
    }
}

impl SolverSettings {
    pub fn with_iterations(n_iter: usize) -> Self {
        Self { n_iter, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), IlqrError> {
        if self.n_iter == 0 {
            return Err(IlqrError::InvalidSettings("n_iter must be at least 1".into()));
        }
        if self.alphas.is_empty() {
            return Err(IlqrError::InvalidSettings("alphas must be nonempty".into()));
        }
        if let Some(&a) = self.alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(IlqrError::InvalidAlpha(a));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(IlqrError::InvalidSettings(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    fn sorted_alphas(&self) -> Vec<f64> {
        let mut a = self.alphas.clone();
        a.sort_by(|x, y| y.total_cmp(x));
        a
    }
}

/// An optimal control problem on a fixed grid.
#[derive(Clone, Copy)]
pub struct Problem<'a, M: ContinuousModel + ?Sized> {
    pub model: &'a M,
    pub scheme: Discretization,
    pub cost: &'a CostModel,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: Trajectory,
    /// Nominal cost after each iteration.
    pub cost_history: Vec<f64>,
    /// Cost of the initial rollout.
    pub initial_cost: f64,
    /// Wall-clock seconds spent in each iteration (linearization, backward
    /// pass and line search).
    pub iter_times: Vec<f64>,
    /// Iterations in which every line-search candidate was rejected.
    pub retained: usize,
    pub last_gains: Option<GainSchedule>,
}

impl Solution {
    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(self.initial_cost)
    }
}

impl<'a, M: ContinuousModel + ?Sized> Problem<'a, M> {
    pub fn new(model: &'a M, scheme: Discretization, cost: &'a CostModel, dt: f64) -> Self {
        Self { model, scheme, cost, dt }
    }

    pub fn linearize_along(&self, traj: &Trajectory) -> Result<Vec<StepLinearization>, IlqrError> {
        traj.states
            .iter()
            .zip(&traj.inputs)
            .map(|(x, u)| self.scheme.linearize(self.model, x, u, self.dt).map_err(IlqrError::from))
            .collect()
    }

    /// One linearization + backward pass + line search, as in a single
    /// iteration of [`optimize`]. Returns the adopted trajectory and its cost.
    pub fn iterate(
        &self,
        nominal: &Trajectory,
        nominal_cost: f64,
        settings: &SolverSettings,
    ) -> Result<(Trajectory, f64, bool, GainSchedule), IlqrError> {
        let lins = self.linearize_along(nominal)?;
        let derivs: Vec<_> = nominal.states.iter().zip(&nominal.inputs).map(|(x, u)| cost_derivatives(x, u, self.cost)).collect();
        let terminal = terminal_expansion(nominal.final_state(), self.cost);
        let (gains, _) = backward_pass(&lins, &derivs, &terminal, settings.mu)?;

        let x0 = &nominal.states[0];
        let mut best: Option<(Trajectory, f64)> = None;
        for alpha in settings.sorted_alphas() {
            let Ok(candidate) = forward_pass(self.model, &self.scheme, nominal, &gains, alpha, x0) else {
                continue;
            };
            let c = evaluate_cost(&candidate, self.cost);
            if !c.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                best = Some((candidate, c));
            }
        }
        match best {
            Some((traj, c)) if settings.always_adopt || c <= nominal_cost => Ok((traj, c, true, gains)),
            _ => Ok((nominal.clone(), nominal_cost, false, gains)),
        }
    }
}

/// Runs exactly `settings.n_iter` ILQR iterations from `x0` and `u_init`.
pub fn optimize<M: ContinuousModel + ?Sized>(
    problem: &Problem<'_, M>,
    x0: &DVector<f64>,
    u_init: &[DVector<f64>],
    settings: &SolverSettings,
) -> Result<Solution, IlqrError> {
    settings.validate()?;
    if u_init.is_empty() {
        return Err(IlqrError::HorizonMismatch("initial control sequence is empty".into()));
    }
    let mut nominal = rollout(problem.model, &problem.scheme, x0, u_init, problem.dt)?;
    let initial_cost = evaluate_cost(&nominal, problem.cost);
    let mut cost = initial_cost;
    let mut cost_history = Vec::with_capacity(settings.n_iter);
    let mut iter_times = Vec::with_capacity(settings.n_iter);
    let mut retained = 0;
    let mut last_gains = None;

    for _ in 0..settings.n_iter {
        let start = Instant::now();
        let (next, next_cost, adopted, gains) = problem.iterate(&nominal, cost, settings)?;
        iter_times.push(start.elapsed().as_secs_f64());
        if adopted {
            nominal = next;
            cost = next_cost;
        } else {
            retained += 1;
        }
        cost_history.push(cost);
        last_gains = Some(gains);
    }
    Ok(Solution { trajectory: nominal, cost_history, initial_cost, iter_times, retained, last_gains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{Backend, IntegratorConfig};
    use crate::dynamics::{LinearSystem, Pendulum, PendulumParams};
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn swing_up_cost() -> CostModel {
        CostModel::diagonal(&[2.0, 0.01], &[2.0], &[2.0, 0.01]).unwrap()
    }

    #[test]
    fn zero_trajectory_has_zero_cost() {
        let t = Trajectory { states: vec![v(&[0.0, 0.0]); 4], inputs: vec![v(&[0.0]); 3], dt: 0.1 };
        assert_eq!(evaluate_cost(&t, &swing_up_cost()), 0.0);
    }

    #[test]
    fn one_step_cost_by_hand() {
        let t = Trajectory { states: vec![v(&[1.0, 0.0]), v(&[0.0, 0.0])], inputs: vec![v(&[1.0])], dt: 0.1 };
        assert_eq!(evaluate_cost(&t, &swing_up_cost()), 4.0);
    }

    #[test]
    fn cost_is_quadratically_homogeneous() {
        let t = Trajectory {
            states: vec![v(&[1.0, -0.5]), v(&[0.3, 2.0]), v(&[-1.0, 0.25])],
            inputs: vec![v(&[1.5]), v(&[-0.7])],
            dt: 0.1,
        };
        let doubled = Trajectory {
            states: t.states.iter().map(|x| x * 2.0).collect(),
            inputs: t.inputs.iter().map(|u| u * 2.0).collect(),
            dt: 0.1,
        };
        let c = swing_up_cost();
        assert!((evaluate_cost(&doubled, &c) - 4.0 * evaluate_cost(&t, &c)).abs() < 1e-12);
    }

    #[test]
    fn derivatives_of_quadratic_cost() {
        let c = swing_up_cost();
        let d0 = cost_derivatives(&v(&[0.0, 0.0]), &v(&[0.0]), &c);
        assert_eq!(d0.l_x, v(&[0.0, 0.0]));
        assert_eq!(d0.l_u, v(&[0.0]));
        let d = cost_derivatives(&v(&[1.0, 1.0]), &v(&[0.0]), &c);
        assert_eq!(d.l_x, v(&[4.0, 0.02]));
        assert_eq!(d.l_ux, DMatrix::zeros(1, 2));
        assert_eq!(d.l_uu, DMatrix::from_element(1, 1, 4.0));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let c = swing_up_cost();
        let x = v(&[0.7, -1.3]);
        let u = v(&[0.4]);
        let d = cost_derivatives(&x, &u, &c);
        let one_step = |x: &DVector<f64>, u: &DVector<f64>| {
            // terminal state held at zero so only l(x, u) varies
            evaluate_cost(&Trajectory { states: vec![x.clone(), v(&[0.0, 0.0])], inputs: vec![u.clone()], dt: 1.0 }, &c)
        };
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (one_step(&xp, &u) - one_step(&xm, &u)) / (2.0 * h);
            assert!((fd - d.l_x[j]).abs() / d.l_x[j].abs() < 1e-6);
        }
        let fd = (one_step(&x, &u.add_scalar(h)) - one_step(&x, &u.add_scalar(-h))) / (2.0 * h);
        assert!((fd - d.l_u[0]).abs() / d.l_u[0].abs() < 1e-6);
    }

    #[test]
    fn invalid_costs_rejected() {
        assert!(CostModel::diagonal(&[1.0, 1.0], &[0.0], &[1.0, 1.0]).is_err());
        assert!(CostModel::diagonal(&[-1.0, 1.0], &[1.0], &[1.0, 1.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(CostModel::new(asym, DMatrix::identity(1, 1), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn backward_pass_without_dynamics_sensitivity() {
        // f_x = 0, f_u = 0 ⇒ Q_u = 2Rū, Q_uu = 2R, Q_ux = 0.
        let c = CostModel::diagonal(&[1.0, 1.0], &[3.0], &[1.0, 1.0]).unwrap();
        let mu = 0.5;
        let ubar = [1.0, -2.0, 0.5];
        let lins: Vec<_> = ubar
            .iter()
            .map(|_| StepLinearization { f_x: DMatrix::zeros(2, 2), f_u: DMatrix::zeros(2, 1), x_next: v(&[0.0, 0.0]) })
            .collect();
        let derivs: Vec<_> = ubar.iter().map(|&u| cost_derivatives(&v(&[1.0, 2.0]), &v(&[u]), &c)).collect();
        let term = terminal_expansion(&v(&[1.0, 1.0]), &c);
        let (gains, _) = backward_pass(&lins, &derivs, &term, mu).unwrap();
        for (i, &u) in ubar.iter().enumerate() {
            let expect = -(2.0 * 3.0 * u) / (2.0 * 3.0 + mu);
            assert!((gains.feedforward[i][0] - expect).abs() < 1e-14);
            assert_eq!(gains.feedback[i], DMatrix::zeros(1, 2));
        }
    }

    #[test]
    fn backward_pass_single_scalar_step_by_hand() {
        // f_x = f_u = 1, Q_s = R = Q_f = 1, x̄ = [1, 1], ū = 0.
        // V_x(1) = 2, V_xx(1) = 2; Q_u = 0 + 2 = 2, Q_uu = 2 + 2 = 4,
        // Q_ux = 2 ⇒ d = −0.5, K = −0.5; V_x(0) = Q_x + Q_uxᵀ d = 4 − 1 = 3,
        // V_xx(0) = Q_xx + Q_uxᵀ K = 4 − 1 = 3.
        let c = CostModel::diagonal(&[1.0], &[1.0], &[1.0]).unwrap();
        let lin = StepLinearization { f_x: DMatrix::identity(1, 1), f_u: DMatrix::identity(1, 1), x_next: v(&[1.0]) };
        let d = cost_derivatives(&v(&[1.0]), &v(&[0.0]), &c);
        let term = terminal_expansion(&v(&[1.0]), &c);
        let (gains, values) = backward_pass(&[lin], &[d], &term, 0.0).unwrap();
        assert!((gains.feedforward[0][0] + 0.5).abs() < 1e-15);
        assert!((gains.feedback[0][(0, 0)] + 0.5).abs() < 1e-15);
        assert!((values[0].v_x[0] - 3.0).abs() < 1e-15);
        assert!((values[0].v_xx[(0, 0)] - 3.0).abs() < 1e-15);
        assert_eq!(values[1], term);
    }

    #[test]
    fn indefinite_q_uu_reports_step() {
        let c = CostModel::diagonal(&[1.0], &[1.0], &[1.0]).unwrap();
        let lin = StepLinearization { f_x: DMatrix::identity(1, 1), f_u: DMatrix::identity(1, 1), x_next: v(&[0.0]) };
        let mut bad = cost_derivatives(&v(&[0.0]), &v(&[0.0]), &c);
        bad.l_uu = DMatrix::from_element(1, 1, -10.0);
        let good = cost_derivatives(&v(&[0.0]), &v(&[0.0]), &c);
        let term = terminal_expansion(&v(&[0.0]), &c);
        let err = backward_pass(&[lin.clone(), lin.clone(), lin], &[good.clone(), bad, good], &term, 0.0).unwrap_err();
        assert_eq!(err, IlqrError::NotPositiveDefinite { step: 1 });
    }

    #[test]
    fn value_hessians_are_symmetric() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let scheme = Discretization::new(Backend::Variational, IntegratorConfig::new(4));
        let c = swing_up_cost();
        let traj = rollout(&p, &scheme, &v(&[-2.0, 1.0]), &vec![v(&[1.0]); 20], 0.02).unwrap();
        let prob = Problem::new(&p, scheme, &c, 0.02);
        let lins = prob.linearize_along(&traj).unwrap();
        let derivs: Vec<_> = traj.states.iter().zip(&traj.inputs).map(|(x, u)| cost_derivatives(x, u, &c)).collect();
        let (_, values) = backward_pass(&lins, &derivs, &terminal_expansion(traj.final_state(), &c), 0.0).unwrap();
        for val in values {
            assert_eq!(val.v_xx.clone(), val.v_xx.transpose());
        }
    }

    #[test]
    fn forward_pass_with_zero_gains_is_identity() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        for backend in Backend::ALL {
            let scheme = Discretization::new(backend, IntegratorConfig::new(3));
            let us: Vec<_> = (0..15).map(|i| v(&[(i as f64 * 0.3).sin()])).collect();
            let nominal = rollout(&p, &scheme, &v(&[-PI, 0.0]), &us, 0.03).unwrap();
            let gains = GainSchedule::zeros(15, 2, 1);
            let out = forward_pass(&p, &scheme, &nominal, &gains, 1.0, &nominal.states[0]).unwrap();
            assert_eq!(out, nominal);
        }
    }

    #[test]
    fn forward_pass_rejects_bad_alpha_and_horizon() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let scheme = Discretization::new(Backend::Euler, IntegratorConfig::new(1));
        let nominal = rollout(&p, &scheme, &v(&[0.0, 0.0]), &vec![v(&[0.0]); 4], 0.01).unwrap();
        let gains = GainSchedule::zeros(4, 2, 1);
        assert_eq!(forward_pass(&p, &scheme, &nominal, &gains, 0.0, &nominal.states[0]), Err(IlqrError::InvalidAlpha(0.0)));
        assert!(forward_pass(&p, &scheme, &nominal, &gains, 1.5, &nominal.states[0]).is_err());
        let short = GainSchedule::zeros(3, 2, 1);
        assert!(matches!(
            forward_pass(&p, &scheme, &nominal, &short, 1.0, &nominal.states[0]),
            Err(IlqrError::HorizonMismatch(_))
        ));
    }

    #[test]
    fn settings_validation() {
        assert!(SolverSettings::default().validate().is_ok());
        assert!(SolverSettings::with_iterations(0).validate().is_err());
        let mut s = SolverSettings::default();
        s.alphas.clear();
        assert!(s.validate().is_err());
        s.alphas = vec![0.5, 0.0];
        assert_eq!(s.validate(), Err(IlqrError::InvalidAlpha(0.0)));
        s.alphas = vec![1.0];
        s.mu = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn origin_is_already_optimal() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let c = swing_up_cost();
        let scheme = Discretization::new(Backend::Variational, IntegratorConfig::new(4));
        let prob = Problem::new(&p, scheme, &c, 0.02);
        let sol = optimize(&prob, &v(&[0.0, 0.0]), &vec![v(&[0.0]); 20], &SolverSettings::with_iterations(5)).unwrap();
        assert!(sol.cost_history.iter().all(|&c| c == 0.0));
        assert!(sol.trajectory.states.iter().all(|x| x.amax() == 0.0));
        assert_eq!(sol.iter_times.len(), 5);
    }

    #[test]
    fn swing_up_converges_and_cost_never_increases() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let c = swing_up_cost();
        let scheme = Discretization::new(Backend::Variational, IntegratorConfig::new(4));
        let prob = Problem::new(&p, scheme, &c, 0.01);
        let sol = optimize(&prob, &v(&[-PI, 0.0]), &vec![v(&[0.0]); 80], &SolverSettings::with_iterations(200)).unwrap();
        assert!(sol.trajectory.final_state().norm() < 0.1, "x_N = {}", sol.trajectory.final_state());
        assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(sol.cost_history[0] <= sol.initial_cost);
    }

    #[test]
    fn empty_horizon_rejected() {
        let sys = LinearSystem::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
        let c = CostModel::diagonal(&[1.0], &[1.0], &[1.0]).unwrap();
        let prob = Problem::new(&sys, Discretization::new(Backend::Euler, IntegratorConfig::new(1)), &c, 0.1);
        assert!(optimize(&prob, &v(&[1.0]), &[], &SolverSettings::default()).is_err());
    }
}
