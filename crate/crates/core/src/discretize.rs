//! Discrete-time transition maps `x_{k+1} = f(x_k, u_k)` under a zero-order
//! hold, and their linearizations `(f_x, f_u)`.
//!
//! Two backends are provided:
//!
//! * [`Backend::Euler`]: the transition is one forward-Euler step and the
//!   linearization is `I + Δt·∂f_c/∂x`, `Δt·∂f_c/∂u`.
//! * [`Backend::Variational`]: the transition is the RK4 flow of the
//!   augmented system `[ẋ; u̇] = [f_c(x, u); 0]`, and the linearization is
//!   the state-transition matrix `Φ(Δt)` obtained by integrating the
//!   variational equation `Φ̇ = (∂f̃_c/∂x̃) Φ`, `Φ(0) = I` alongside it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::ContinuousModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error("timestep must be positive and finite, got {0}")]
    InvalidTimestep(f64),
    #[error("integration produced non-finite values")]
    BlowUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    Euler,
    Variational,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Euler, Backend::Variational];

    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Euler => "euler",
            Backend::Variational => "variational",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(Backend::Euler),
            "variational" | "ve" => Ok(Backend::Variational),
            other => Err(format!("unknown backend '{other}' (expected euler or variational)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    Rk4,
}

/// Internal integrator used within one discretization interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorConfig {
    pub substeps: usize,
    pub method: IntegrationMethod,
}

impl IntegratorConfig {
    pub fn new(substeps: usize) -> Self {
        Self { substeps: substeps.max(1), method: IntegrationMethod::Rk4 }
    }

    /// Smallest substep count keeping the internal step at or below `max_step`.
    pub fn with_max_step(dt: f64, max_step: f64) -> Self {
        let n = (dt / max_step - 1e-9).ceil().max(1.0) as usize;
        Self::new(n)
    }

    /// Default rule: internal steps of at most 5 ms.
    pub fn for_step(dt: f64) -> Self {
        Self::with_max_step(dt, 0.005)
    }
}

/// Per-step linear model of the discrete transition map.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLinearization {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub x_next: DVector<f64>,
}

fn check_dt(dt: f64) -> Result<(), DiscretizeError> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(DiscretizeError::InvalidTimestep(dt))
    }
}

fn finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|e| e.is_finite())
}

fn finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|e| e.is_finite())
}

/// RK4 flow of `ẋ = f_c(x, u)` over `dt` with `u` held constant.
pub fn integrate_step<M: ContinuousModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    cfg: IntegratorConfig,
) -> Result<DVector<f64>, DiscretizeError> {
    check_dt(dt)?;
    let h = dt / cfg.substeps as f64;
    let mut x = x.clone();
    for _ in 0..cfg.substeps {
        x = rk4_state(model, &x, u, h);
    }
    if finite_vec(&x) {
        Ok(x)
    } else {
        Err(DiscretizeError::BlowUp)
    }
}

fn rk4_state<M: ContinuousModel + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = model.dynamics(x, u);
    let k2 = model.dynamics(&(x + &k1 * (0.5 * h)), u);
    let k3 = model.dynamics(&(x + &k2 * (0.5 * h)), u);
    let k4 = model.dynamics(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Forward-Euler step and the matching first-order linearization.
pub fn linearize_euler<M: ContinuousModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<StepLinearization, DiscretizeError> {
    check_dt(dt)?;
    let n = model.state_dim();
    let f_x = DMatrix::identity(n, n) + model.jacobian_x(x, u) * dt;
    let f_u = model.jacobian_u(x, u) * dt;
    let x_next = euler_step(model, x, u, dt);
    if finite_vec(&x_next) && finite_mat(&f_x) && finite_mat(&f_u) {
        Ok(StepLinearization { f_x, f_u, x_next })
    } else {
        Err(DiscretizeError::BlowUp)
    }
}

fn euler_step<M: ContinuousModel + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    x + model.dynamics(x, u) * dt
}

/// `∂f̃_c/∂x̃` for the augmented system: `[[f_x, f_u], [0, 0]]`.
fn augmented_jacobian<M: ContinuousModel + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let n = model.state_dim();
    let m = model.input_dim();
    let mut a = DMatrix::zeros(n + m, n + m);
    a.view_mut((0, 0), (n, n)).copy_from(&model.jacobian_x(x, u));
    a.view_mut((0, n), (n, m)).copy_from(&model.jacobian_u(x, u));
    a
}

/// Returns the full `(n+m)×(n+m)` state-transition matrix together with the
/// propagated state. Exposed for tests of the block structure.
pub fn state_transition_matrix<M: ContinuousModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    cfg: IntegratorConfig,
) -> Result<(DMatrix<f64>, DVector<f64>), DiscretizeError> {
    check_dt(dt)?;
    let n = model.state_dim();
    let m = model.input_dim();
    let h = dt / cfg.substeps as f64;
    let mut x = x.clone();
    let mut phi = DMatrix::<f64>::identity(n + m, n + m);
    for _ in 0..cfg.substeps {
        // The state stages are evaluated exactly as in `rk4_state`, so the
        // propagated state is bit-identical to `integrate_step`.
        let k1 = model.dynamics(&x, u);
        let a1 = augmented_jacobian(model, &x, u);
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = model.dynamics(&x2, u);
        let a2 = augmented_jacobian(model, &x2, u);
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = model.dynamics(&x3, u);
        let a3 = augmented_jacobian(model, &x3, u);
        let x4 = &x + &k3 * h;
        let k4 = model.dynamics(&x4, u);
        let a4 = augmented_jacobian(model, &x4, u);

        let p1 = &a1 * &phi;
        let p2 = &a2 * (&phi + &p1 * (0.5 * h));
        let p3 = &a3 * (&phi + &p2 * (0.5 * h));
        let p4 = &a4 * (&phi + &p3 * h);

        x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        phi = &phi + (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0);
    }
    if finite_vec(&x) && finite_mat(&phi) {
        Ok((phi, x))
    } else {
        Err(DiscretizeError::BlowUp)
    }
}

/// Linearization of the exact (RK4-resolved) transition map via the
/// variational equation.
pub fn linearize_variational<M: ContinuousModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    cfg: IntegratorConfig,
) -> Result<StepLinearization, DiscretizeError> {
    let n = model.state_dim();
    let m = model.input_dim();
    let (phi, x_next) = state_transition_matrix(model, x, u, dt, cfg)?;
    Ok(StepLinearization { f_x: phi.view((0, 0), (n, n)).into_owned(), f_u: phi.view((0, n), (n, m)).into_owned(), x_next })
}

/// A discretization scheme: backend plus internal integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discretization {
    pub backend: Backend,
    pub integrator: IntegratorConfig,
}

impl Discretization {
    pub fn new(backend: Backend, integrator: IntegratorConfig) -> Self {
        Self { backend, integrator }
    }

    /// The discrete transition `f(x, u)` consistent with [`Self::linearize`].
    pub fn step<M: ContinuousModel + ?Sized>(
        &self,
        model: &M,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>, DiscretizeError> {
        match self.backend {
            Backend::Euler => {
                check_dt(dt)?;
                let next = euler_step(model, x, u, dt);
                if finite_vec(&next) {
                    Ok(next)
                } else {
                    Err(DiscretizeError::BlowUp)
                }
            }
            Backend::Variational => integrate_step(model, x, u, dt, self.integrator),
        }
    }

    pub fn linearize<M: ContinuousModel + ?Sized>(
        &self,
        model: &M,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<StepLinearization, DiscretizeError> {
        match self.backend {
            Backend::Euler => linearize_euler(model, x, u, dt),
            Backend::Variational => linearize_variational(model, x, u, dt, self.integrator),
        }
    }
}
