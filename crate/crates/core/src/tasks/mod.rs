//! Desk-scale guidance tasks: guided sampling, initial-condition optimisation and synthetic
//! inverse problems.

mod inverse;

pub use inverse::{make_inverse_problem, InverseKind, InverseProblem, Measurement};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::{dto_grad, greedy_grad, GreedyEstimator, LossSpec};
use crate::linalg::{all_finite, seeded_rng, standard_normal, Vector};
use crate::models::PosteriorModel;
use crate::solvers::{step_with_stages, Grid, Scheme, SolverConfig, Trajectory};

/// Where the guidance gradient at each solver node comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceEngine {
    Greedy { estimator: GreedyEstimator },
    /// Exact backpropagation through a solve of the remaining interval.
    Dto { scheme: Scheme, n_steps: usize, grid: Grid },
}

impl GuidanceEngine {
    pub fn greedy(estimator: GreedyEstimator) -> Self {
        GuidanceEngine::Greedy { estimator }
    }

    fn gradient(&self, model: &PosteriorModel, loss: &LossSpec, t: f64, x: &Vector) -> Result<Vector> {
        let est = match *self {
            GuidanceEngine::Greedy { estimator } => greedy_grad(model, loss, t, x, estimator)?,
            GuidanceEngine::Dto { scheme, n_steps, grid } => {
                dto_grad(model, loss, &SolverConfig::new(scheme, n_steps).with_grid(grid), t, x)?
            }
        };
        Ok(est.grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSchedule {
    Constant { eta: f64 },
    /// `eta (1 - t)` for `t > t_cut`, zero before.
    AnnealedLinearCutoff { eta: f64, t_cut: f64 },
}

impl EtaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EtaSchedule::Constant { eta } | EtaSchedule::AnnealedLinearCutoff { eta, .. } if !(eta >= 0.0 && eta.is_finite()) => {
                Err(Error::config("guidance.eta", format!("must be finite and non-negative, got {eta}")))
            }
            EtaSchedule::AnnealedLinearCutoff { t_cut, .. } if !(0.0..=1.0).contains(&t_cut) => {
                Err(Error::config("guidance.t_cut", format!("must lie in [0, 1], got {t_cut}")))
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match *self {
            EtaSchedule::Constant { eta } => eta,
            EtaSchedule::AnnealedLinearCutoff { eta, t_cut } => {
                if t > t_cut {
                    eta * (1.0 - t)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceRun {
    pub engine: GuidanceEngine,
    pub eta_schedule: EtaSchedule,
    /// Gradient updates per solver node.
    pub inner_steps: usize,
    pub solver: SolverConfig,
    /// Seed of the initial noise drawn by [`GuidanceRun::initial_noise`].
    pub seed: u64,
}

impl GuidanceRun {
    pub fn validate(&self) -> Result<()> {
        self.eta_schedule.validate()?;
        if self.inner_steps == 0 {
            return Err(Error::config("guidance.inner_steps", "must be at least 1"));
        }
        if let GuidanceEngine::Greedy {
            estimator: GreedyEstimator::KStepEuler(0),
        } = self.engine
        {
            return Err(Error::config("engine.k", "k-step estimator needs k >= 1"));
        }
        if let GuidanceEngine::Dto { n_steps: 0, .. } = self.engine {
            return Err(Error::config("engine.n_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn initial_noise(&self, dim: usize) -> Vector {
        noise_for_seed(dim, self.seed)
    }
}

/// Standard-normal initial noise, reproducible per seed.
pub fn noise_for_seed(dim: usize, seed: u64) -> Vector {
    standard_normal(&mut seeded_rng(seed), dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedOutcome {
    /// States before guidance at each node, and the terminal state.
    pub trajectory: Trajectory,
    /// `L(x_{1|t_n})` at the guided state of each node.
    pub loss_curve: Vec<f64>,
    pub metrics: RunMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub terminal_loss: f64,
    pub distance_to_truth: Option<f64>,
}

pub fn run_metrics(terminal: &Vector, loss: &LossSpec, truth: Option<&Vector>) -> RunMetrics {
    RunMetrics {
        terminal_loss: loss.value(terminal),
        distance_to_truth: truth.map(|x| (terminal - x).norm()),
    }
}

/// Fraction of terminal states within `radius` of `center`.
pub fn hit_rate(terminals: &[Vector], center: &Vector, radius: f64) -> f64 {
    if terminals.is_empty() {
        return 0.0;
    }
    let hits = terminals.iter().filter(|x| (*x - center).norm() <= radius).count();
    hits as f64 / terminals.len() as f64
}

/// Alternates `inner_steps` guidance updates `x <- x - eta_t grad` with one solver step.
///
/// Nodes where `eta_t = 0` skip the gradient entirely, so a zero schedule reproduces the unguided
/// solve bit for bit.
pub fn guided_sample(
    model: &PosteriorModel,
    run: &GuidanceRun,
    loss: &LossSpec,
    x0: &Vector,
    truth: Option<&Vector>,
) -> Result<GuidedOutcome> {
    run.validate()?;
    loss.validate(model.dim())?;
    if x0.len() != model.dim() || !all_finite(x0) {
        return Err(Error::Input("initial state must be finite with the model dimension".into()));
    }
    let times = run.solver.nodes(model)?;
    let n_steps = times.len() - 1;
    let mut states = Vec::with_capacity(times.len());
    let mut loss_curve = Vec::with_capacity(n_steps);
    let mut last_loss = f64::NAN;
    let mut x = x0.clone();
    for n in 0..n_steps {
        states.push(x.clone());
        let t = times[n];
        let eta = run.eta_schedule.at(t);
        if eta > 0.0 {
            for _ in 0..run.inner_steps {
                let g = match run.engine.gradient(model, loss, t, &x) {
                    Err(e) if e.is_divergence() => return Err(Error::GuidanceDivergence { step: n, last_loss }),
                    other => other?,
                };
                x -= g * eta;
                if !all_finite(&x) {
                    return Err(Error::GuidanceDivergence { step: n, last_loss });
                }
            }
        }
        let value = loss.value(&model.posterior_mean(t, &x)?);
        if !value.is_finite() {
            return Err(Error::GuidanceDivergence { step: n, last_loss });
        }
        last_loss = value;
        loss_curve.push(value);
        x = match step_with_stages(model, run.solver.scheme, t, times[n + 1], &x, n) {
            Ok((next, _)) => next,
            Err(e) if e.is_divergence() => return Err(Error::GuidanceDivergence { step: n, last_loss }),
            Err(e) => return Err(e),
        };
    }
    states.push(x);
    let metrics = run_metrics(states.last().unwrap(), loss, truth);
    Ok(GuidedOutcome {
        trajectory: Trajectory {
            times,
            states,
            stages: None,
        },
        loss_curve,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Gradient descent with backtracking: the step halves until the loss decreases and grows
    /// by half after each accepted step.
    GradientDescent,
    /// Heavy-ball momentum with a fixed step.
    Momentum { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub step_size: f64,
    /// Stop once the loss is at or below this value.
    #[serde(default)]
    pub target_loss: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::GradientDescent,
            iterations: 100,
            step_size: 1.0,
            target_loss: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOutcome {
    /// Lowest-loss iterate seen.
    pub x0: Vector,
    pub best_loss: f64,
    /// Terminal loss of every evaluated iterate, starting with the initial point.
    pub history: Vec<f64>,
    /// Iteration at which a non-finite loss or gradient stopped the run.
    pub aborted_at: Option<usize>,
}

/// Optimises the initial noise against the terminal loss with exact gradients of the discrete solve.
pub fn e2e_optimize_x0(
    model: &PosteriorModel,
    loss: &LossSpec,
    solver: &SolverConfig,
    opt: &OptimizeConfig,
    x0: &Vector,
) -> Result<OptimizeOutcome> {
    loss.validate(model.dim())?;
    if !(opt.step_size > 0.0 && opt.step_size.is_finite()) {
        return Err(Error::config("optimize.step_size", "must be positive and finite"));
    }
    if let Optimizer::Momentum { beta } = opt.optimizer {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config("optimize.beta", "must lie in [0, 1)"));
        }
    }
    let solver = solver.clone().from_time(0.0);
    let evaluate = |x: &Vector| dto_grad(model, loss, &solver, 0.0, x);
    let mut out = OptimizeOutcome {
        x0: x0.clone(),
        best_loss: f64::INFINITY,
        history: Vec::new(),
        aborted_at: None,
    };
    if opt.iterations == 0 {
        return Ok(out);
    }
    let mut x = x0.clone();
    let mut current = evaluate(&x)?;
    let mut value = loss.value(current.estimate_of_x1.as_ref().unwrap());
    out.history.push(value);
    out.best_loss = value;
    let mut lr = opt.step_size;
    let mut velocity = Vector::zeros(x.len());
    for it in 0..opt.iterations {
        if value <= opt.target_loss {
            break;
        }
        let g = current.grad.clone();
        let (cand, cand_est, cand_value) = match opt.optimizer {
            Optimizer::GradientDescent => {
                let mut accepted = None;
                for _ in 0..40 {
                    let cand = &x - &g * lr;
                    match evaluate(&cand) {
                        Ok(est) => {
                            let v = loss.value(est.estimate_of_x1.as_ref().unwrap());
                            if v.is_finite() && v < value {
                                accepted = Some((cand, est, v));
                                break;
                            }
                        }
                        Err(e) if e.is_divergence() => {}
                        Err(e) => return Err(e),
                    }
                    lr *= 0.5;
                }
                match accepted {
                    Some(a) => {
                        lr *= 1.5;
                        a
                    }
                    // No decrease along the gradient at any tested step: a stationary point.
                    None => break,
                }
            }
            Optimizer::Momentum { beta } => {
                velocity = &velocity * beta - &g * lr;
                let cand = &x + &velocity;
                match evaluate(&cand) {
                    Ok(est) => {
                        let v = loss.value(est.estimate_of_x1.as_ref().unwrap());
                        (cand, est, v)
                    }
                    Err(e) if e.is_divergence() => {
                        out.aborted_at = Some(it);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        if !cand_value.is_finite() || !all_finite(&cand_est.grad) {
            out.aborted_at = Some(it);
            break;
        }
        x = cand;
        current = cand_est;
        value = cand_value;
        out.history.push(value);
        if value < out.best_loss {
            out.best_loss = value;
            out.x0 = x.clone();
        }
    }
    Ok(out)
}
