use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix, Vector};

/// Elementwise measurement nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearOp {
    /// `clip(alpha x, -1, 1)`, a saturating (HDR-style) squash.
    Clip { alpha: f64 },
    /// `tanh(alpha x)`, a smooth squash.
    Tanh { alpha: f64 },
}

impl NonlinearOp {
    pub fn apply(&self, x: &Vector) -> Vector {
        match *self {
            NonlinearOp::Clip { alpha } => x.map(|v| (alpha * v).clamp(-1.0, 1.0)),
            NonlinearOp::Tanh { alpha } => x.map(|v| (alpha * v).tanh()),
        }
    }

    /// Diagonal of the operator Jacobian.
    pub fn derivative(&self, x: &Vector) -> Vector {
        match *self {
            NonlinearOp::Clip { alpha } => x.map(|v| if (alpha * v).abs() < 1.0 { alpha } else { 0.0 }),
            NonlinearOp::Tanh { alpha } => x.map(|v| alpha * (1.0 - (alpha * v).tanh().powi(2))),
        }
    }
}

/// A terminal guidance loss.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    /// `0.5 ||x - target||^2`.
    Quadratic { target: Vector },
    /// `||A x - y||^2 / (2 beta^2)`.
    LinearMeasurement { a: Matrix, y: Vector, beta: f64 },
    /// `||op(x) - y||^2 / (2 beta^2)`.
    NonlinearMeasurement { op: NonlinearOp, y: Vector, beta: f64 },
}

impl LossSpec {
    pub fn quadratic(target: Vector) -> Self {
        LossSpec::Quadratic { target }
    }

    /// Checks dimensions against the state dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match self {
            LossSpec::Quadratic { target } => target.len() == dim && all_finite(target),
            LossSpec::LinearMeasurement { a, y, beta } => {
                a.ncols() == dim && a.nrows() == y.len() && all_finite(y) && *beta > 0.0
            }
            LossSpec::NonlinearMeasurement { y, beta, .. } => y.len() == dim && all_finite(y) && *beta > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("loss", format!("loss is inconsistent with state dimension {dim}")))
        }
    }

    fn residual(&self, x: &Vector) -> Vector {
        match self {
            LossSpec::Quadratic { target } => x - target,
            LossSpec::LinearMeasurement { a, y, .. } => a * x - y,
            LossSpec::NonlinearMeasurement { op, y, .. } => op.apply(x) - y,
        }
    }

    pub fn value(&self, x: &Vector) -> f64 {
        let r = self.residual(x);
        match self {
            LossSpec::Quadratic { .. } => 0.5 * r.norm_squared(),
            LossSpec::LinearMeasurement { beta, .. } | LossSpec::NonlinearMeasurement { beta, .. } => {
                r.norm_squared() / (2.0 * beta * beta)
            }
        }
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        let r = self.residual(x);
        match self {
            LossSpec::Quadratic { .. } => r,
            LossSpec::LinearMeasurement { a, beta, .. } => a.tr_mul(&r) / (beta * beta),
            LossSpec::NonlinearMeasurement { op, beta, .. } => {
                op.derivative(x).component_mul(&r) / (beta * beta)
            }
        }
    }
}
