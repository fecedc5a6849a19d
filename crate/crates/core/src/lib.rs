//! Guided generation for affine-path flow models.
//!
//! The crate is organised bottom-up:
//!
//! - [`paths`]: schedules `(alpha_t, sigma_t)`, the semi-linear coefficients `a_t, b_t` and the
//!   signal-to-noise reparameterisation `gamma_t = alpha_t / sigma_t`.
//! - [`models`]: posterior-mean backends. The Gaussian-mixture backend is exact, so every identity
//!   that assumes a perfectly trained model holds to machine precision; the micro-MLP backend is a
//!   small learned stand-in with hand-written derivatives.
//! - [`solvers`]: fixed-grid integrators in `t` and in `gamma`, plus a quadrature-based evaluator of
//!   the exponential-integrator form of the exact flow.
//! - [`grads`]: every gradient engine, from the one-evaluation posterior ("greedy") gradient to full
//!   backpropagation through the solve and the continuous adjoint.
//! - [`verify`]: convergence-order fits and identity checks.
//! - [`tasks`]: guided sampling, initial-condition optimisation and synthetic inverse problems.

pub mod error;
pub mod grads;
pub mod linalg;
pub mod models;
pub mod paths;
pub mod solvers;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
