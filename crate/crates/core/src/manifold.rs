//! Stable-manifold solver for the infinite-horizon HJB problem
//! `min ∫ xᵀQx + uᵀRu dt` subject to `ẋ = f(x) + g(x)u`.
//!
//! The stabilizing HJB solution is the stable manifold of the origin of the
//! Hamiltonian system `ẋ = ∂H/∂λ`, `λ̇ = −∂H/∂x`. Near the origin the
//! manifold is computed by Picard iteration on integral equations in
//! coordinates `(q, p)` that block-diagonalize the linear part into
//! `diag(F, −Fᵀ)`. Trajectories starting far from the origin are obtained by
//! integrating the Hamiltonian system backward in time from a point of the
//! local manifold and matching the seed to the requested initial state.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::InputAffine;
use crate::reference::ReferenceTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("coordinate transform is singular")]
    SingularTransform,
    #[error("Picard iteration diverged at iteration {iteration} (|xi| = {radius:e}); use a smaller seed")]
    Divergence { iteration: usize, radius: f64 },
    #[error("no manifold trajectory matches the target; best residual {residual:e}")]
    NoMatch { residual: f64 },
    #[error("solution does not decay: |x(t_end)| = {x_norm:e}, |lambda(t_end)| = {lambda_norm:e}")]
    NoDecay { x_norm: f64, lambda_norm: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Hamiltonian data of the HJB problem for an input-affine model.
pub struct HamiltonianSystem<'a, M: InputAffine + ?Sized> {
    model: &'a M,
    state_weight: DMatrix<f64>,
    input_weight: DMatrix<f64>,
    input_weight_inv: DMatrix<f64>,
}

impl<'a, M: InputAffine + ?Sized> HamiltonianSystem<'a, M> {
    pub fn new(model: &'a M, state_weight: DMatrix<f64>, input_weight: DMatrix<f64>) -> Result<Self, ManifoldError> {
        let n = model.state_dim();
        let m = model.input_dim();
        if state_weight.shape() != (n, n) || input_weight.shape() != (m, m) {
            return Err(ManifoldError::InvalidInput("weight dimensions do not match the model".into()));
        }
        let input_weight_inv = input_weight
            .clone()
            .cholesky()
            .ok_or_else(|| ManifoldError::InvalidInput("R must be positive definite".into()))?
            .inverse();
        Ok(Self { model, state_weight, input_weight, input_weight_inv })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn state_weight(&self) -> &DMatrix<f64> {
        &self.state_weight
    }

    pub fn input_weight(&self) -> &DMatrix<f64> {
        &self.input_weight
    }

    /// `R̄(x) = g(x) R⁻¹ g(x)ᵀ`.
    pub fn rbar(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.model.input_matrix(x);
        &g * &self.input_weight_inv * g.transpose()
    }

    /// `H(x, λ) = λᵀf(x) − ¼ λᵀ R̄(x) λ + xᵀQx`.
    pub fn hamiltonian(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        lambda.dot(&self.model.drift(x)) - 0.25 * lambda.dot(&(self.rbar(x) * lambda)) + x.dot(&(&self.state_weight * x))
    }

    /// Minimizer of the Hamiltonian over `u`: `−½ R⁻¹ g(x)ᵀ λ`.
    pub fn optimal_input(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        -(&self.input_weight_inv * self.model.input_matrix(x).transpose() * lambda) * 0.5
    }

    /// `(∂H/∂λ, −∂H/∂x)`.
    pub fn canonical_rhs(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.state_dim();
        let g = self.model.input_matrix(x);
        let rinv_gt_l = &self.input_weight_inv * g.transpose() * lambda;
        let xdot = self.model.drift(x) - &g * &rinv_gt_l * 0.5;
        let fx = self.model.jacobian_x(x, &DVector::zeros(self.model.input_dim()));
        let mut ldot = -(fx.transpose() * lambda) - &self.state_weight * x * 2.0;
        for j in 0..n {
            let dg = self.model.input_matrix_partial(x, j);
            ldot[j] += 0.5 * lambda.dot(&(dg * &rinv_gt_l));
        }
        (xdot, ldot)
    }

    /// Linear part at the origin: `(A, R̄(0))`.
    pub fn linear_part(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let zero = DVector::zeros(n);
        (self.model.jacobian_x(&zero, &DVector::zeros(self.model.input_dim())), self.rbar(&zero))
    }

    /// Jacobian of the canonical equations at the origin,
    /// `[[A, −½R̄], [−2Q, −Aᵀ]]`.
    pub fn linear_hamiltonian_matrix(&self) -> DMatrix<f64> {
        let (a, rbar) = self.linear_part();
        hamiltonian_block(&a, &(rbar * -0.5), &(&self.state_weight * -2.0), &(-a.transpose()))
    }
}

fn hamiltonian_block(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(b);
    h.view_mut((n, 0), (n, n)).copy_from(c);
    h.view_mut((n, n), (n, n)).copy_from(d);
    h
}

/// Largest real part among the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Stabilizing solution `Γ` of `ΓA + AᵀΓ − ΓR̄Γ + Q = 0`, i.e. the one that
/// makes `F = A − R̄Γ` Hurwitz.
///
/// Uses the matrix sign function of the Hamiltonian matrix
/// `[[A, −R̄], [−Q, −Aᵀ]]` (scaled Newton iteration); the stable invariant
/// subspace `[I; Γ]` spans the kernel of `sign + I`.
pub fn solve_riccati_continuous(a: &DMatrix<f64>, rbar: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, ManifoldError> {
    let n = a.nrows();
    if !a.is_square() || rbar.shape() != (n, n) || q.shape() != (n, n) {
        return Err(ManifoldError::InvalidInput("Riccati data must be square and conformant".into()));
    }
    let mut z = hamiltonian_block(a, &(-rbar), &(-q), &(-a.transpose()));
    let mut converged = false;
    for _ in 0..100 {
        let inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| ManifoldError::NoStabilizingSolution("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        let det = z.determinant().abs();
        let c = if det.is_finite() && det > 0.0 { det.powf(-1.0 / (2 * n) as f64) } else { 1.0 };
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).norm() / next.norm();
        z = next;
        if !z.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ManifoldError::NoStabilizingSolution("sign iteration did not converge".into()));
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&-(z.view((0, 0), (n, n)) + &id));
    rhs.view_mut((n, 0), (n, n)).copy_from(&-z.view((n, 0), (n, n)));
    let gamma = lhs.svd(true, true).solve(&rhs, 1e-14).map_err(|e| ManifoldError::NoStabilizingSolution(e.to_string()))?;
    let gamma = (&gamma + gamma.transpose()) * 0.5;

    let f = a - rbar * &gamma;
    let abscissa = spectral_abscissa(&f);
    if !(abscissa < -1e-10) {
        return Err(ManifoldError::NoStabilizingSolution(format!("closed loop not Hurwitz (max Re = {abscissa:e})")));
    }
    Ok(gamma)
}

/// Solves `F S + S Fᵀ = C` via the Kronecker form.
pub fn solve_lyapunov(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, ManifoldError> {
    let n = f.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let op = id.kronecker(f) + f.kronecker(&id);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(ManifoldError::SingularTransform)?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Linear coordinate change `(x, λ) = T (q, p)` that block-diagonalizes the
/// linearized canonical equations into `diag(F, −Fᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldTransform {
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
    /// `F = A − R̄(0)Γ`.
    pub f: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl ManifoldTransform {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn to_canonical(&self, q: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let z = self.t.view((0, 0), (2 * n, n)) * q + self.t.view((0, n), (2 * n, n)) * p;
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }

    pub fn from_canonical(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let z = self.t_inv.view((0, 0), (2 * n, n)) * x + self.t_inv.view((0, n), (2 * n, n)) * lambda;
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }
}

/// `T = [[I, S], [2Γ, I + 2ΓS]]` with `F S + S Fᵀ = ½R̄(0)`.
///
/// The first block column spans the stable subspace `λ = 2Γx` of the linear
/// Hamiltonian flow; the second spans the anti-stable one.
pub fn build_transform(a: &DMatrix<f64>, rbar0: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<ManifoldTransform, ManifoldError> {
    let n = a.nrows();
    let f = a - rbar0 * gamma;
    let s = solve_lyapunov(&f, &(rbar0 * 0.5))?;
    let id = DMatrix::<f64>::identity(n, n);
    let two_gamma = gamma * 2.0;
    let t = hamiltonian_block(&id, &s, &two_gamma, &(&id + &two_gamma * &s));
    let t_inv = t.clone().try_inverse().ok_or(ManifoldError::SingularTransform)?;
    if !t_inv.iter().all(|v| v.is_finite()) {
        return Err(ManifoldError::SingularTransform);
    }
    Ok(ManifoldTransform { t, t_inv, f, gamma: gamma.clone() })
}

/// Riccati solve plus transform for a Hamiltonian system.
pub fn linear_setup<M: InputAffine + ?Sized>(sys: &HamiltonianSystem<'_, M>) -> Result<ManifoldTransform, ManifoldError> {
    let (a, rbar0) = sys.linear_part();
    let gamma = solve_riccati_continuous(&a, &rbar0, sys.state_weight())?;
    build_transform(&a, &rbar0, &gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub k_max: usize,
    pub t_end: f64,
    pub grid_points: usize,
    /// Stop once successive iterates differ by less than this (sup norm).
    pub tol: f64,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { k_max: 60, t_end: 6.0, grid_points: 2000, tol: 1e-9 }
    }
}

/// Sampled Picard iterate `(q_k, p_k)` on `[0, t_end]`.
#[derive(Debug, Clone)]
pub struct ManifoldIterate {
    pub t_grid: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    pub xi: DVector<f64>,
    pub iterations: usize,
    /// Sup-norm difference between consecutive iterates.
    pub differences: Vec<f64>,
}

impl ManifoldIterate {
    /// Maps the samples back to `(x, λ)`.
    pub fn canonical_paths(&self, tf: &ManifoldTransform) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        self.q.iter().zip(&self.p).map(|(q, p)| tf.to_canonical(q, p)).unzip()
    }
}

/// Higher-order terms `(n_s, n_u)` of the canonical equations in `(q, p)`.
fn nonlinear_terms<M: InputAffine + ?Sized>(
    sys: &HamiltonianSystem<'_, M>,
    tf: &ManifoldTransform,
    q: &DVector<f64>,
    p: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (x, lambda) = tf.to_canonical(q, p);
    let (xdot, ldot) = sys.canonical_rhs(&x, &lambda);
    let (qdot, pdot) = tf.from_canonical(&xdot, &ldot);
    (qdot - &tf.f * q, pdot + tf.f.transpose() * p)
}

fn sup_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Picard iteration
///
/// ```text
/// q_{k+1}(t) = e^{Ft} ξ + ∫_0^t e^{F(t−s)} n_s(q_k, p_k) ds
/// p_{k+1}(t) = −∫_t^∞ e^{−Fᵀ(t−s)} n_u(q_k, p_k) ds
/// ```
///
/// starting from `q_0 = e^{Ft} ξ`, `p_0 = 0`. Both integrals use the composite
/// trapezoidal rule on a uniform grid, accumulated recursively; the
/// `p` integral is truncated at `t_end`.
pub fn picard_iterate<M: InputAffine + ?Sized>(
    sys: &HamiltonianSystem<'_, M>,
    tf: &ManifoldTransform,
    xi: &DVector<f64>,
    settings: &PicardSettings,
) -> Result<ManifoldIterate, ManifoldError> {
    let n = tf.dim();
    if xi.len() != n {
        return Err(ManifoldError::InvalidInput(format!("seed has dimension {}, expected {n}", xi.len())));
    }
    if !(settings.t_end > 0.0) || settings.grid_points < 2 {
        return Err(ManifoldError::InvalidInput("t_end must be positive with at least two grid points".into()));
    }
    let g = settings.grid_points;
    let h = settings.t_end / (g - 1) as f64;
    let t_grid: Vec<f64> = (0..g).map(|j| j as f64 * h).collect();
    let e_fh = (&tf.f * h).exp();
    let e_fth = e_fh.transpose();

    let mut linear = Vec::with_capacity(g);
    linear.push(xi.clone());
    for j in 1..g {
        let next = &e_fh * &linear[j - 1];
        linear.push(next);
    }
    let mut q = linear.clone();
    let mut p = vec![DVector::zeros(n); g];
    let mut differences = Vec::new();
    let mut iterations = 0;

    for k in 0..settings.k_max {
        let (ns, nu): (Vec<_>, Vec<_>) = q.iter().zip(&p).map(|(q, p)| nonlinear_terms(sys, tf, q, p)).unzip();

        let mut q_next = Vec::with_capacity(g);
        let mut acc = DVector::zeros(n);
        q_next.push(&linear[0] + &acc);
        for j in 1..g {
            acc = &e_fh * (&acc + &ns[j - 1] * (0.5 * h)) + &ns[j] * (0.5 * h);
            q_next.push(&linear[j] + &acc);
        }

        let mut p_next = vec![DVector::zeros(n); g];
        let mut acc = DVector::zeros(n);
        for j in (0..g - 1).rev() {
            acc = &e_fth * (&acc + &nu[j + 1] * (0.5 * h)) + &nu[j] * (0.5 * h);
            p_next[j] = -&acc;
        }

        let diff = sup_diff(&q_next, &q).max(sup_diff(&p_next, &p));
        q = q_next;
        p = p_next;
        iterations = k + 1;
        differences.push(diff);

        let radius = xi.norm();
        if !diff.is_finite() {
            return Err(ManifoldError::Divergence { iteration: iterations, radius });
        }
        let len = differences.len();
        if len >= 4 && differences[len - 4..].windows(2).all(|w| w[1] > w[0]) && diff > settings.tol {
            return Err(ManifoldError::Divergence { iteration: iterations, radius });
        }
        if diff < settings.tol {
            break;
        }
    }
    Ok(ManifoldIterate { t_grid, q, p, xi: xi.clone(), iterations, differences })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSettings {
    pub picard: PicardSettings,
    /// Radius of the seed `ξ` on the local manifold.
    pub seed_radius: f64,
    /// Maximum RK4 step of the backward extension.
    pub backward_step: f64,
    pub max_backward_time: f64,
    /// Directions tried by the initial scan.
    pub scan_points: usize,
    /// Required distance between `x(0)` and the target.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of scanned branches refined and compared by cost.
    pub candidates: usize,
}

impl Default for MatchSettings {
    fn default() -> Self {
        Self {
            picard: PicardSettings::default(),
            seed_radius: 0.05,
            backward_step: 1e-3,
            max_backward_time: 4.0,
            scan_points: 90,
            tolerance: 1e-4,
            max_iterations: 60,
            candidates: 8,
        }
    }
}

/// Optimal trajectory sampled on an increasing time grid starting at the
/// requested initial state.
#[derive(Debug, Clone)]
pub struct ManifoldSolution {
    pub t_grid: Vec<f64>,
    pub x_path: Vec<DVector<f64>>,
    pub lambda_path: Vec<DVector<f64>>,
    pub u_path: Vec<DVector<f64>>,
    pub xi: DVector<f64>,
    /// Duration of the backward extension ahead of the Picard segment.
    pub backward_time: f64,
    /// `‖x(0) − target‖`.
    pub match_residual: f64,
}

impl ManifoldSolution {
    /// `∫ xᵀQx + uᵀRu dt` by the trapezoidal rule over the grid.
    pub fn cost<M: InputAffine + ?Sized>(&self, sys: &HamiltonianSystem<'_, M>) -> f64 {
        let integrand: Vec<f64> = self
            .x_path
            .iter()
            .zip(&self.u_path)
            .map(|(x, u)| x.dot(&(sys.state_weight() * x)) + u.dot(&(sys.input_weight() * u)))
            .collect();
        self.t_grid.windows(2).zip(integrand.windows(2)).map(|(t, l)| 0.5 * (t[1] - t[0]) * (l[0] + l[1])).sum()
    }

    /// Largest `|H(x, λ)|` over the samples.
    pub fn max_hjb_residual<M: InputAffine + ?Sized>(&self, sys: &HamiltonianSystem<'_, M>) -> f64 {
        self.x_path.iter().zip(&self.lambda_path).map(|(x, l)| hjb_residual(sys, x, l).abs()).fold(0.0, f64::max)
    }

    /// Largest mismatch between central-difference time derivatives of the
    /// sampled `(x, λ)` and the canonical equations at interior samples,
    /// relative to the largest canonical derivative along the path.
    pub fn max_canonical_residual<M: InputAffine + ?Sized>(&self, sys: &HamiltonianSystem<'_, M>) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 1..self.t_grid.len() - 1 {
            let (t0, t1, t2) = (self.t_grid[j - 1], self.t_grid[j], self.t_grid[j + 1]);
            let (fx, fl) = sys.canonical_rhs(&self.x_path[j], &self.lambda_path[j]);
            scale = scale.max(fx.amax()).max(fl.amax());
            if (t2 - t1 - (t1 - t0)).abs() > 1e-9 {
                continue;
            }
            let dt = t2 - t0;
            let dx = (&self.x_path[j + 1] - &self.x_path[j - 1]) / dt;
            let dl = (&self.lambda_path[j + 1] - &self.lambda_path[j - 1]) / dt;
            worst = worst.max((dx - fx).amax()).max((dl - fl).amax());
        }
        if scale > 0.0 {
            worst / scale
        } else {
            worst
        }
    }

    pub fn final_norms(&self) -> (f64, f64) {
        (self.x_path.last().unwrap().norm(), self.lambda_path.last().unwrap().norm())
    }

    /// Linear resampling onto a uniform grid of spacing `step`.
    pub fn resample(&self, step: f64) -> ReferenceTrajectory {
        let raw = ReferenceTrajectory { times: self.t_grid.clone(), states: self.x_path.clone(), inputs: self.u_path.clone() };
        let end = *self.t_grid.last().unwrap();
        let count = (end / step + 1e-9).floor() as usize;
        let times: Vec<f64> = (0..=count).map(|i| i as f64 * step).collect();
        let states = times.iter().map(|&t| raw.state_at(t).unwrap()).collect();
        let inputs = times.iter().map(|&t| raw.input_at(t).unwrap()).collect();
        ReferenceTrajectory { times, states, inputs }
    }
}

/// `H(x, λ)`; zero on the stable manifold.
pub fn hjb_residual<M: InputAffine + ?Sized>(sys: &HamiltonianSystem<'_, M>, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    sys.hamiltonian(x, lambda)
}

fn rk4_canonical<M: InputAffine + ?Sized>(
    sys: &HamiltonianSystem<'_, M>,
    x: &DVector<f64>,
    l: &DVector<f64>,
    h: f64,
) -> (DVector<f64>, DVector<f64>) {
    let (k1x, k1l) = sys.canonical_rhs(x, l);
    let (k2x, k2l) = sys.canonical_rhs(&(x + &k1x * (0.5 * h)), &(l + &k1l * (0.5 * h)));
    let (k3x, k3l) = sys.canonical_rhs(&(x + &k2x * (0.5 * h)), &(l + &k2l * (0.5 * h)));
    let (k4x, k4l) = sys.canonical_rhs(&(x + &k3x * h), &(l + &k3l * h));
    (x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0), l + (k1l + k2l * 2.0 + k3l * 2.0 + k4l) * (h / 6.0))
}

/// Seeded manifold evaluation shared by the search and the final assembly.
struct Seeder<'s, 'a, M: InputAffine + ?Sized> {
    sys: &'s HamiltonianSystem<'a, M>,
    tf: ManifoldTransform,
    settings: MatchSettings,
}

impl<M: InputAffine + ?Sized> Seeder<'_, '_, M> {
    fn seed(&self, xi: &DVector<f64>) -> Result<(ManifoldIterate, DVector<f64>, DVector<f64>), ManifoldError> {
        let it = picard_iterate(self.sys, &self.tf, xi, &self.settings.picard)?;
        let (x0, l0) = self.tf.to_canonical(&it.q[0], &it.p[0]);
        Ok((it, x0, l0))
    }

    /// Backward path from the seed over `tau`, ordered from `t = −τ` to `0`.
    fn backward(&self, x0: &DVector<f64>, l0: &DVector<f64>, tau: f64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, f64) {
        let steps = ((tau / self.settings.backward_step).ceil() as usize).max(1);
        let h = tau / steps as f64;
        let mut xs = vec![x0.clone()];
        let mut ls = vec![l0.clone()];
        for _ in 0..steps {
            let (x, l) = rk4_canonical(self.sys, xs.last().unwrap(), ls.last().unwrap(), -h);
            xs.push(x);
            ls.push(l);
        }
        xs.reverse();
        ls.reverse();
        (xs, ls, h)
    }

    fn initial_state(&self, xi: &DVector<f64>, tau: f64) -> Result<DVector<f64>, ManifoldError> {
        let (_, x0, l0) = self.seed(xi)?;
        if tau <= 0.0 {
            return Ok(x0);
        }
        let (xs, _, _) = self.backward(&x0, &l0, tau);
        Ok(xs[0].clone())
    }

    /// Local minima of the distance to `target` along the backward path
    /// from the seed `xi`, as `(distance, τ, x)`.
    fn scan(&self, xi: &DVector<f64>, target: &DVector<f64>) -> Vec<(f64, f64, DVector<f64>)> {
        let Ok((_, x0, l0)) = self.seed(xi) else {
            return Vec::new();
        };
        let h = self.settings.backward_step;
        let bound = 10.0 * (1.0 + target.norm());
        let (mut x, mut l) = (x0, l0);
        let mut minima = Vec::new();
        let mut prev = (&x - target).norm();
        let mut falling = false;
        let mut last = (0.0, x.clone());
        let mut t = 0.0;
        while t < self.settings.max_backward_time {
            (x, l) = rk4_canonical(self.sys, &x, &l, -h);
            t += h;
            if !(x.norm() < bound) {
                break;
            }
            let d = (&x - target).norm();
            if falling && d > prev {
                minima.push((prev, last.0, last.1.clone()));
            }
            falling = d < prev;
            prev = d;
            last = (t, x.clone());
        }
        if falling {
            minima.push((prev, last.0, last.1));
        }
        minima
    }
}

/// Damped least squares with a forward-difference Jacobian.
fn levenberg_marquardt<F>(mut z: DVector<f64>, residual: F, tol: f64, max_iter: usize) -> (DVector<f64>, f64)
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let Some(mut r) = residual(&z) else {
        return (z, f64::INFINITY);
    };
    let mut damping = 1e-3;
    for _ in 0..max_iter {
        if r.norm() < tol {
            break;
        }
        let mut jac = DMatrix::zeros(r.len(), z.len());
        for j in 0..z.len() {
            let step = 1e-7 * (1.0 + z[j].abs());
            let mut zp = z.clone();
            zp[j] += step;
            let Some(rp) = residual(&zp) else {
                return (z, r.norm());
            };
            jac.set_column(j, &((rp - &r) / step));
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * &r;
        let mut improved = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += damping * (1.0 + jtj[(i, i)]);
            }
            let Some(delta) = lhs.lu().solve(&(-&grad)) else {
                damping *= 10.0;
                continue;
            };
            let cand = &z + &delta;
            if let Some(rc) = residual(&cand) {
                if rc.norm() < r.norm() {
                    z = cand;
                    r = rc;
                    damping = (damping * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let norm = r.norm();
    (z, norm)
}

/// Finds the manifold trajectory whose initial state is `target`.
///
/// Targets inside the seed ball are matched directly on the local manifold
/// (`x(0, ξ) = target`). Otherwise the seed `ξ` and the backward-extension
/// time `τ` are searched jointly: a scan over seed directions yields the
/// closest approaches of distinct branches, damped least squares refines
/// `(ξ, τ)` for each with a penalty holding `|ξ|` at the seed radius, and
/// stalled refinements fall back to continuation through intermediate
/// targets. The lowest-cost match is returned.
pub fn extend_and_match<M: InputAffine + ?Sized>(
    sys: &HamiltonianSystem<'_, M>,
    target: &DVector<f64>,
    settings: &MatchSettings,
) -> Result<ManifoldSolution, ManifoldError> {
    let n = sys.state_dim();
    if target.len() != n {
        return Err(ManifoldError::InvalidInput(format!("target has dimension {}, expected {n}", target.len())));
    }
    let tf = linear_setup(sys)?;
    let seeder = Seeder { sys, tf, settings: *settings };
    let tol = settings.tolerance;

    if target.norm() <= settings.seed_radius {
        let res = |xi: &DVector<f64>| seeder.initial_state(xi, 0.0).ok().map(|x| x - target);
        let (xi, r) = levenberg_marquardt(target.clone(), res, tol * 1e-2, settings.max_iterations);
        if !(r < tol) {
            return Err(ManifoldError::NoMatch { residual: r });
        }
        return assemble(&seeder, &xi, 0.0, target);
    }

    // several branches of the manifold may pass over the target; the
    // optimal trajectory is the cheapest one
    let mut best: Option<(f64, ManifoldSolution)> = None;
    let mut last_err = None;
    for (xi, tau) in search_far_target(&seeder, target)? {
        match assemble(&seeder, &xi, tau, target) {
            Ok(sol) => {
                let c = sol.cost(sys);
                if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                    best = Some((c, sol));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, sol)), _) => Ok(sol),
        (None, Some(e)) => Err(e),
        (None, None) => Err(ManifoldError::NoMatch { residual: f64::INFINITY }),
    }
}

fn search_far_target<M: InputAffine + ?Sized>(
    seeder: &Seeder<'_, '_, M>,
    target: &DVector<f64>,
) -> Result<Vec<(DVector<f64>, f64)>, ManifoldError> {
    let settings = &seeder.settings;
    let n = target.len();
    let r0 = settings.seed_radius;
    let directions: Vec<DVector<f64>> = if n >= 2 {
        (0..settings.scan_points)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / settings.scan_points as f64;
                let mut d = DVector::zeros(n);
                d[0] = phi.cos();
                d[1] = phi.sin();
                d
            })
            .collect()
    } else {
        vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)]
    };
    let count = directions.len();

    let scans: Vec<Vec<(f64, f64, DVector<f64>)>> = directions.par_iter().map(|d| seeder.scan(&(d * r0), target)).collect();
    // keep minima that are also minimal across neighbouring directions
    let mut candidates = Vec::new();
    for (i, minima) in scans.iter().enumerate() {
        for (dist, tau, closest) in minima {
            let beaten = [(i + count - 1) % count, (i + 1) % count]
                .iter()
                .any(|&k| scans[k].iter().any(|(d2, t2, _)| (t2 - tau).abs() < 0.1 && d2 < dist));
            if !beaten {
                candidates.push((*dist, *tau, &directions[i] * r0, closest.clone()));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    // one representative per branch: similar extension time from a nearby seed direction
    let mut distinct: Vec<(f64, f64, DVector<f64>, DVector<f64>)> = Vec::new();
    for c in candidates {
        let same_branch = distinct.iter().any(|d| (d.1 - c.1).abs() < 0.1 && d.2.dot(&c.2) > 0.0);
        if !same_branch {
            distinct.push(c);
        }
    }
    let mut candidates = distinct;
    candidates.truncate(settings.candidates);
    if candidates.is_empty() {
        return Err(ManifoldError::NoMatch { residual: f64::INFINITY });
    }

    let solve = |xi: &DVector<f64>, tau: f64, goal: &DVector<f64>| {
        let mut z = xi.clone().resize_vertically(n + 1, tau);
        z[n] = tau;
        let res = |z: &DVector<f64>| {
            let xi = z.rows(0, n).into_owned();
            let tau = z[n];
            if !(0.0..=2.0 * settings.max_backward_time).contains(&tau) {
                return None;
            }
            let x = seeder.initial_state(&xi, tau).ok()?;
            let mut r = (x - goal).resize_vertically(n + 1, 0.0);
            r[n] = xi.norm() - r0;
            Some(r)
        };
        let (z, r) = levenberg_marquardt(z, res, settings.tolerance * 1e-2, settings.max_iterations);
        (z.rows(0, n).into_owned(), z[n], r)
    };

    let refine = |(_, tau, xi, closest): &(f64, f64, DVector<f64>, DVector<f64>)| -> Result<(DVector<f64>, f64), f64> {
        let (xi1, tau1, r) = solve(xi, *tau, target);
        if r < settings.tolerance {
            return Ok((xi1, tau1));
        }
        // continuation from the closest scanned state toward the target
        let (mut xi_c, mut tau_c) = (xi.clone(), *tau);
        for stage in 1..=8 {
            let goal = closest + (target - closest) * (stage as f64 / 8.0);
            let (xs, ts, rs) = solve(&xi_c, tau_c, &goal);
            if !(rs < settings.tolerance) {
                return Err(r.min(rs));
            }
            xi_c = xs;
            tau_c = ts;
        }
        Ok((xi_c, tau_c))
    };
    let results: Vec<_> = candidates.par_iter().map(refine).collect();
    let best_residual = results.iter().filter_map(|r| r.as_ref().err()).fold(f64::INFINITY, |a, &b| a.min(b));
    let matched: Vec<_> = results.into_iter().filter_map(Result::ok).collect();
    if matched.is_empty() {
        return Err(ManifoldError::NoMatch { residual: best_residual });
    }
    Ok(matched)
}

fn assemble<M: InputAffine + ?Sized>(
    seeder: &Seeder<'_, '_, M>,
    xi: &DVector<f64>,
    tau: f64,
    target: &DVector<f64>,
) -> Result<ManifoldSolution, ManifoldError> {
    let sys = seeder.sys;
    let (it, x0, l0) = seeder.seed(xi)?;
    let (fwd_x, fwd_l) = it.canonical_paths(&seeder.tf);

    let (mut t_grid, mut x_path, mut lambda_path) = if tau > 0.0 {
        let (xs, ls, h) = seeder.backward(&x0, &l0, tau);
        let times: Vec<f64> = (0..xs.len()).map(|j| j as f64 * h).collect();
        (times, xs, ls)
    } else {
        (vec![0.0], vec![x0], vec![l0])
    };
    // the seed sample closes the backward segment, so the Picard segment starts after it
    let offset = *t_grid.last().unwrap();
    for j in 1..it.t_grid.len() {
        t_grid.push(offset + it.t_grid[j]);
        x_path.push(fwd_x[j].clone());
        lambda_path.push(fwd_l[j].clone());
    }
    let u_path = x_path.iter().zip(&lambda_path).map(|(x, l)| sys.optimal_input(x, l)).collect();

    let solution = ManifoldSolution {
        match_residual: (&x_path[0] - target).norm(),
        t_grid,
        x_path,
        lambda_path,
        u_path,
        xi: xi.clone(),
        backward_time: tau,
    };
    let (x_norm, lambda_norm) = solution.final_norms();
    if !(x_norm < 1e-3 && lambda_norm < 1e-3) {
        return Err(ManifoldError::NoDecay { x_norm, lambda_norm });
    }
    Ok(solution)
}
