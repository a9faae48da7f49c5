//! Nonlinear trajectory optimization and model predictive control with
//! iterative LQR, using either forward-Euler or variational-equation
//! linearizations of the discretized dynamics, plus a stable-manifold
//! solver for the infinite-horizon HJB problem that serves as an exact
//! reference.

// `!(a < b)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod discretize;
pub mod dynamics;
pub mod experiment;
pub mod ilqr;
pub mod manifold;
pub mod mpc;
pub mod output;
pub mod reference;
