//! Continuous-time controlled systems `ẋ = f_c(x, u)`.
//!
//! Models carry their analytic Jacobians so that the variational-equation
//! linearizer can evaluate `∂f_c/∂x` along the flow without nested finite
//! differences.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("pendulum parameter {name} must be finite and strictly positive, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A continuous-time system with analytic first derivatives.
pub trait ContinuousModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jacobian_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

/// Input-affine systems `ẋ = f(x) + g(x) u`, as needed by the HJB solver.
pub trait InputAffine: ContinuousModel {
    /// Drift term `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics(x, &DVector::zeros(self.input_dim()))
    }

    /// Input matrix `g(x)` (n×m).
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `∂g/∂x_j` (n×m) for coordinate `j`.
    fn input_matrix_partial(&self, x: &DVector<f64>, j: usize) -> DMatrix<f64>;
}

/// Physical constants of the pendulum on a mass-less cart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    /// Mass (kg).
    pub mass: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Pivot to center-of-gravity distance (m).
    pub length: f64,
    /// Moment of inertia (kg·m²).
    pub inertia: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        let mass = 0.09;
        let length = 0.3;
        Self { mass, gravity: 9.8, length, inertia: mass * length * length / 3.0 }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [("M", self.mass), ("G", self.gravity), ("L", self.length), ("J", self.inertia)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }
}

/// Inverted pendulum driven by cart acceleration `u`; state `[θ, θ̇]` with
/// `θ = 0` upright and `θ = ±π` hanging.
#[derive(Debug, Clone, Copy)]
pub struct Pendulum {
    params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    /// Linearization of the drift at the upright equilibrium.
    pub fn upright_linearization(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DVector::zeros(2);
        let u = DVector::zeros(1);
        (self.jacobian_x(&x, &u), self.jacobian_u(&x, &u))
    }

    fn denominator(&self, s: f64) -> f64 {
        let p = &self.params;
        p.inertia + p.mass * p.length * p.length * s * s
    }
}

impl ContinuousModel for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (s, c) = x[0].sin_cos();
        let ml2 = p.mass * p.length * p.length;
        let num = p.mass * p.gravity * p.length * s - ml2 * x[1] * x[1] * s * c - p.length * c * u[0];
        DVector::from_vec(vec![x[1], num / self.denominator(s)])
    }

    fn jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let (s, c) = x[0].sin_cos();
        let ml2 = p.mass * p.length * p.length;
        let den = self.denominator(s);
        let num = p.mass * p.gravity * p.length * s - ml2 * x[1] * x[1] * s * c - p.length * c * u[0];
        let dnum = p.mass * p.gravity * p.length * c - ml2 * x[1] * x[1] * (c * c - s * s) + p.length * s * u[0];
        let dden = 2.0 * ml2 * s * c;
        let df2_dx1 = (dnum * den - num * dden) / (den * den);
        let df2_dx2 = -2.0 * ml2 * x[1] * s * c / den;
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, df2_dx1, df2_dx2])
    }

    fn jacobian_u(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.input_matrix(x)
    }
}

impl InputAffine for Pendulum {
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[0].sin_cos();
        DMatrix::from_column_slice(2, 1, &[0.0, -self.params.length * c / self.denominator(s)])
    }

    fn input_matrix_partial(&self, x: &DVector<f64>, j: usize) -> DMatrix<f64> {
        if j != 0 {
            return DMatrix::zeros(2, 1);
        }
        let p = &self.params;
        let (s, c) = x[0].sin_cos();
        let den = self.denominator(s);
        let dden = 2.0 * p.mass * p.length * p.length * s * c;
        let dg2 = p.length * s / den + p.length * c * dden / (den * den);
        DMatrix::from_column_slice(2, 1, &[0.0, dg2])
    }
}

/// Linear time-invariant system `ẋ = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(ModelError::Dimension(format!("A is {}x{}, B is {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols())));
        }
        Ok(Self { a, b })
    }
}

impl ContinuousModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobian_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
}

impl InputAffine for LinearSystem {
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn input_matrix_partial(&self, _x: &DVector<f64>, _j: usize) -> DMatrix<f64> {
        DMatrix::zeros(self.b.nrows(), self.b.ncols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pendulum() -> Pendulum {
        Pendulum::new(PendulumParams::default()).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn central_diff_x(p: &Pendulum, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            out.set_column(j, &((p.dynamics(&xp, u) - p.dynamics(&xm, u)) / (2.0 * h)));
        }
        out
    }

    fn central_diff_u(p: &Pendulum, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let up = u.add_scalar(h);
        let um = u.add_scalar(-h);
        let col = (p.dynamics(x, &up) - p.dynamics(x, &um)) / (2.0 * h);
        DMatrix::from_column_slice(2, 1, col.as_slice())
    }

    #[test]
    fn equilibria() {
        let p = pendulum();
        let u = v(&[0.0]);
        assert_eq!(p.dynamics(&v(&[0.0, 0.0]), &u), v(&[0.0, 0.0]));
        let f = p.dynamics(&v(&[-PI, 0.0]), &u);
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn horizontal_position() {
        // MGL/(J + ML²) = 3G/(4L) when J = ML²/3
        let p = pendulum();
        let f = p.dynamics(&v(&[PI / 2.0, 0.0]), &v(&[0.0]));
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 24.5).abs() < 1e-12);
    }

    #[test]
    fn jacobians_at_equilibria() {
        let p = pendulum();
        let prm = p.params();
        let mgl_j = prm.mass * prm.gravity * prm.length / prm.inertia;
        let l_j = prm.length / prm.inertia;
        let u = v(&[0.0]);

        let origin = v(&[0.0, 0.0]);
        let fx = p.jacobian_x(&origin, &u);
        let fu = p.jacobian_u(&origin, &u);
        assert!((fx - DMatrix::from_row_slice(2, 2, &[0.0, 1.0, mgl_j, 0.0])).amax() < 1e-12);
        assert!((fu - DMatrix::from_column_slice(2, 1, &[0.0, -l_j])).amax() < 1e-12);

        let down = v(&[-PI, 0.0]);
        let fx = p.jacobian_x(&down, &u);
        let fu = p.jacobian_u(&down, &u);
        assert!((fx - DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -mgl_j, 0.0])).amax() < 1e-10);
        assert!((fu - DMatrix::from_column_slice(2, 1, &[0.0, l_j])).amax() < 1e-10);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut prm = PendulumParams { inertia: 0.0, ..PendulumParams::default() };
        assert_eq!(Pendulum::new(prm).unwrap_err(), ModelError::InvalidParameter { name: "J", value: 0.0 });
        prm = PendulumParams { length: f64::NAN, ..PendulumParams::default() };
        assert!(Pendulum::new(prm).is_err());
    }

    #[test]
    fn input_matrix_partial_matches_fd() {
        let p = pendulum();
        for &th in &[-2.0, -0.4, 0.3, 1.7, 3.0] {
            let h = 1e-6;
            let gp = p.input_matrix(&v(&[th + h, 0.0]));
            let gm = p.input_matrix(&v(&[th - h, 0.0]));
            let fd = (gp - gm) / (2.0 * h);
            let an = p.input_matrix_partial(&v(&[th, 0.5]), 0);
            assert!((fd - an).amax() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn jacobians_match_central_differences(
            x1 in -2.0 * PI..2.0 * PI,
            x2 in -10.0f64..10.0,
            u0 in -20.0f64..20.0,
        ) {
            let p = pendulum();
            let x = v(&[x1, x2]);
            let u = v(&[u0]);
            let h = 1e-6;
            let jx = p.jacobian_x(&x, &u);
            let ju = p.jacobian_u(&x, &u);
            let ex = (central_diff_x(&p, &x, &u, h) - &jx).amax();
            let eu = (central_diff_u(&p, &x, &u, h) - &ju).amax();
            prop_assert!(ex < 1e-5 * (1.0 + jx.amax()), "x err {}", ex);
            prop_assert!(eu < 1e-5 * (1.0 + ju.amax()), "u err {}", eu);
        }

        #[test]
        fn equilibria_at_multiples_of_pi(k in -4i32..=4) {
            let p = pendulum();
            let f = p.dynamics(&v(&[k as f64 * PI, 0.0]), &v(&[0.0]));
            prop_assert!(f.amax() < 1e-10);
        }

        #[test]
        fn dynamics_affine_in_input(x1 in -PI..PI, x2 in -5.0f64..5.0, a in -10.0f64..10.0) {
            let p = pendulum();
            let x = v(&[x1, x2]);
            let f0 = p.dynamics(&x, &v(&[0.0]));
            let f1 = p.dynamics(&x, &v(&[a])) - &f0;
            let f2 = p.dynamics(&x, &v(&[2.0 * a])) - &f0;
            prop_assert!((f2 - f1 * 2.0).amax() < 1e-9 * (1.0 + a.abs() * 100.0));
        }
    }
}
