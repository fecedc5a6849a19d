use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::{LossSpec, NonlinearOp};
use crate::linalg::{all_finite, seeded_rng, standard_normal, Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InverseKind {
    /// `d_y x d` matrix with `N(0, 1/d)` entries.
    RandomProjection { d_y: usize },
    /// Observes the listed coordinates.
    Mask { indices: Vec<usize> },
    /// `clip(alpha x, -1, 1)` on every coordinate.
    NonlinearSquash { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    Linear(Matrix),
    Nonlinear(NonlinearOp),
}

impl Measurement {
    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            Measurement::Linear(a) => a * x,
            Measurement::Nonlinear(op) => op.apply(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseProblem {
    pub operator: Measurement,
    pub y: Vector,
    pub beta: f64,
    pub truth: Option<Vector>,
}

impl InverseProblem {
    /// `||y - A(x)||^2 / (2 beta^2)`.
    pub fn loss(&self) -> LossSpec {
        match &self.operator {
            Measurement::Linear(a) => LossSpec::LinearMeasurement {
                a: a.clone(),
                y: self.y.clone(),
                beta: self.beta,
            },
            Measurement::Nonlinear(op) => LossSpec::NonlinearMeasurement {
                op: *op,
                y: self.y.clone(),
                beta: self.beta,
            },
        }
    }

    pub fn residual(&self, x: &Vector) -> f64 {
        (&self.y - self.operator.apply(x)).norm()
    }
}

/// Builds `y = A(truth) + beta * noise`, reproducibly per seed.
pub fn make_inverse_problem(kind: &InverseKind, truth: &Vector, beta: f64, seed: u64) -> Result<InverseProblem> {
    let d = truth.len();
    if d == 0 || !all_finite(truth) {
        return Err(Error::Input("truth must be a finite non-empty vector".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("problem.beta", format!("must be positive, got {beta}")));
    }
    let mut rng = seeded_rng(seed);
    let operator = match kind {
        InverseKind::RandomProjection { d_y } => {
            if *d_y == 0 || *d_y > d {
                return Err(Error::config("problem.d_y", format!("must lie in [1, {d}], got {d_y}")));
            }
            let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
            Measurement::Linear(Matrix::from_fn(*d_y, d, |_, _| normal.sample(&mut rng)))
        }
        InverseKind::Mask { indices } => {
            if indices.is_empty() {
                return Err(Error::config("problem.indices", "mask must select at least one coordinate"));
            }
            let mut seen = vec![false; d];
            for &i in indices {
                if i >= d || seen[i] {
                    return Err(Error::config("problem.indices", format!("index {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
            Measurement::Linear(Matrix::from_fn(indices.len(), d, |r, c| if indices[r] == c { 1.0 } else { 0.0 }))
        }
        InverseKind::NonlinearSquash { alpha } => {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(Error::config("problem.alpha", "must be positive and finite"));
            }
            Measurement::Nonlinear(NonlinearOp::Clip { alpha: *alpha })
        }
    };
    let clean = operator.apply(truth);
    let y = &clean + standard_normal(&mut rng, clean.len()) * beta;
    Ok(InverseProblem {
        operator,
        y,
        beta,
        truth: Some(truth.clone()),
    })
}
