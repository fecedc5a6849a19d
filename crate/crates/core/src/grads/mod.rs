//! Gradient engines for a terminal loss `L(x_T)` with respect to an interior state `x_t`.
//!
//! - Greedy estimators differentiate a cheap short solve to the endpoint (one posterior-mean
//!   evaluation, one midpoint step, or `k` Euler steps).
//! - DTO backpropagates exactly through the discrete solve.
//! - OTD integrates the continuous adjoint `da/dt = -J_u^T a` backward from `a(T) = grad L`.
//! - Forward sensitivity pushes a tangent `w` through `dw/dt = J_u w` alongside the state.

mod loss;

pub use loss::{LossSpec, NonlinearOp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix, Vector};
use crate::models::PosteriorModel;
use crate::solvers::{exp_euler_coeffs, solve, step_with_stages, Grid, HermiteCurve, Scheme, SolverConfig, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    GreedyEuler,
    GreedyMidpoint,
    GreedyKStepEuler(usize),
    DtoFull,
    OtdAdjoint,
    ForwardSensitivity,
}

impl Engine {
    pub fn label(self) -> String {
        match self {
            Engine::GreedyEuler => "greedy_euler".into(),
            Engine::GreedyMidpoint => "greedy_midpoint".into(),
            Engine::GreedyKStepEuler(k) => format!("greedy_{k}step_euler"),
            Engine::DtoFull => "dto".into(),
            Engine::OtdAdjoint => "otd".into(),
            Engine::ForwardSensitivity => "forward_sensitivity".into(),
        }
    }
}

/// The short solve a greedy gradient differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyEstimator {
    /// `grad_x L(x_{1|t}(x))`.
    Euler1,
    /// One midpoint step to `1 - eps`.
    Midpoint,
    /// `k` uniform Euler steps to `1 - eps`.
    KStepEuler(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub engine: Engine,
    pub at_time: f64,
    pub grad: Vector,
    pub steps_used: usize,
    /// The engine's own estimate of the terminal state.
    pub estimate_of_x1: Option<Vector>,
    /// Interval length in `t`.
    pub h_t: f64,
    /// Interval length in `gamma` (infinite when the interval reaches `t = 1`).
    pub h_gamma: f64,
}

fn interval(model: &PosteriorModel, t: f64, t_end: f64) -> (f64, f64) {
    let s = model.schedule();
    let h_gamma = if t_end >= 1.0 { f64::INFINITY } else { s.gamma(t_end) - s.gamma(t) };
    (t_end - t, h_gamma)
}

fn check_grad(g: &Vector) -> Result<()> {
    if all_finite(g) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: 0,
            stage: "gradient",
        })
    }
}

pub fn greedy_grad(
    model: &PosteriorModel,
    loss: &LossSpec,
    t: f64,
    x: &Vector,
    estimator: GreedyEstimator,
) -> Result<GradientEstimate> {
    let t_end = model.schedule().t_end();
    if !(t < t_end) {
        return Err(Error::Domain { t, lo: 0.0, hi: t_end });
    }
    match estimator {
        GreedyEstimator::Euler1 => {
            let xhat = model.posterior_mean(t, x)?;
            let grad = model.posterior_vjp(t, x, &loss.gradient(&xhat))?;
            check_grad(&grad)?;
            let (_, h_gamma) = interval(model, t, 1.0);
            Ok(GradientEstimate {
                engine: Engine::GreedyEuler,
                at_time: t,
                grad,
                steps_used: 1,
                estimate_of_x1: Some(xhat),
                h_t: 1.0 - t,
                h_gamma,
            })
        }
        GreedyEstimator::Midpoint => {
            let mut g = dto_grad(model, loss, &SolverConfig::new(Scheme::Midpoint, 1), t, x)?;
            g.engine = Engine::GreedyMidpoint;
            Ok(g)
        }
        GreedyEstimator::KStepEuler(0) => Err(Error::config("engine.k", "k-step estimator needs k >= 1")),
        GreedyEstimator::KStepEuler(k) => {
            let mut g = dto_grad(model, loss, &SolverConfig::new(Scheme::Euler, k), t, x)?;
            g.engine = Engine::GreedyKStepEuler(k);
            Ok(g)
        }
    }
}

/// Reverse pass of one step: maps the cotangent of `x_{n+1}` to the cotangent of `x_n`.
fn step_vjp(
    model: &PosteriorModel,
    scheme: Scheme,
    t0: f64,
    t1: f64,
    x: &Vector,
    stages: &[Vector],
    cot: &Vector,
) -> Result<Vector> {
    match scheme.tableau() {
        Some(tab) => {
            let h = t1 - t0;
            let s = tab.b.len();
            let mut kbar: Vec<Vector> = tab.b.iter().map(|bj| cot * (h * bj)).collect();
            let mut out = cot.clone();
            for j in (0..s).rev() {
                if kbar[j].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let xbar_j = model.field_vjp(t0 + tab.c[j] * h, &stages[j], &kbar[j])?;
                for (i, aji) in tab.a[j].iter().enumerate() {
                    if *aji != 0.0 {
                        kbar[i] += &xbar_j * (h * aji);
                    }
                }
                out += xbar_j;
            }
            Ok(out)
        }
        None => {
            let (c_x, c_hat) = exp_euler_coeffs(model, t0, t1);
            Ok(cot * c_x + model.posterior_vjp(t0, x, cot)? * c_hat)
        }
    }
}

/// Cotangents at every node of `traj` given the terminal cotangent, by exact reverse replay.
pub fn backprop_trajectory(
    model: &PosteriorModel,
    scheme: Scheme,
    traj: &Trajectory,
    terminal_cot: &Vector,
) -> Result<Vec<Vector>> {
    let n = traj.n_steps();
    let mut cots = vec![Vector::zeros(terminal_cot.len()); n + 1];
    cots[n] = terminal_cot.clone();
    for i in (0..n).rev() {
        let (t0, t1) = (traj.times[i], traj.times[i + 1]);
        let recomputed;
        let stages: &[Vector] = match &traj.stages {
            Some(s) => &s[i],
            None => {
                recomputed = step_with_stages(model, scheme, t0, t1, &traj.states[i], i)?.1;
                &recomputed
            }
        };
        let c = step_vjp(model, scheme, t0, t1, &traj.states[i], stages, &cots[i + 1])?;
        if !all_finite(&c) {
            return Err(Error::Divergence {
                step: i,
                stage: "reverse",
            });
        }
        cots[i] = c;
    }
    Ok(cots)
}

/// Exact gradient of `L(solve(x))` for the discrete solve `config` started at `t`.
pub fn dto_grad(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    t: f64,
    x: &Vector,
) -> Result<GradientEstimate> {
    let cfg = config.clone().from_time(t).storing_stages();
    let traj = solve(model, &cfg, x)?;
    let cots = backprop_trajectory(model, cfg.scheme, &traj, &loss.gradient(traj.terminal()))?;
    let t_end = *traj.times.last().unwrap();
    let (h_t, h_gamma) = interval(model, t, t_end);
    Ok(GradientEstimate {
        engine: Engine::DtoFull,
        at_time: t,
        grad: cots[0].clone(),
        steps_used: cfg.n_steps,
        estimate_of_x1: Some(traj.terminal().clone()),
        h_t,
        h_gamma,
    })
}

/// How the backward adjoint pass obtains forward states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Replay {
    /// Interpolate the stored forward trajectory (cubic Hermite between nodes).
    #[default]
    StoredStates,
    /// Re-integrate the state backward together with the adjoint. Known to be unstable.
    Resolve,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointConfig {
    /// Explicit Runge-Kutta scheme for the backward pass; it reuses the forward grid.
    pub scheme: Scheme,
    #[serde(default)]
    pub replay: Replay,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            replay: Replay::StoredStates,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub t: f64,
    pub a_x: Vector,
    /// Gradient with respect to a constant additive control on `[t, T]`.
    pub a_z: Vector,
}

#[derive(Clone, Debug)]
pub struct AdjointSolution {
    /// Increasing in `t`; the last entry is the terminal condition.
    pub states: Vec<AdjointState>,
    pub forward: Trajectory,
}

impl AdjointSolution {
    pub fn initial(&self) -> &AdjointState {
        &self.states[0]
    }
}

/// Integrates the augmented adjoint `(a_x, a_z)` backward over the forward grid of `config`
/// started at `t`.
pub fn otd_adjoint(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    t: f64,
    x: &Vector,
    adjoint: &AdjointConfig,
) -> Result<AdjointSolution> {
    let tab = adjoint
        .scheme
        .tableau()
        .ok_or_else(|| Error::config("adjoint.scheme", "backward pass needs euler, midpoint or rk4"))?;
    let cfg = config.clone().from_time(t);
    let forward = solve(model, &cfg, x)?;
    let derivs = forward
        .times
        .iter()
        .zip(&forward.states)
        .map(|(t, x)| model.vector_field(*t, x))
        .collect::<Result<Vec<_>>>()?;
    let curve = HermiteCurve::new(forward.times.clone(), forward.states.clone(), derivs)?;
    let d = x.len();
    let n = forward.n_steps();
    let a_t = loss.gradient(forward.terminal());
    let mut states = vec![AdjointState {
        t: forward.times[n],
        a_x: a_t.clone(),
        a_z: Vector::zeros(d),
    }];
    // Backward state: (x only under Resolve, a_x, a_z).
    let mut xs = forward.terminal().clone();
    let mut a = a_t;
    let mut z = Vector::zeros(d);
    for i in (0..n).rev() {
        let (t1, t0) = (forward.times[i + 1], forward.times[i]);
        let h = t0 - t1;
        let s = tab.b.len();
        let mut kx: Vec<Vector> = Vec::with_capacity(s);
        let mut ka: Vec<Vector> = Vec::with_capacity(s);
        let mut kz: Vec<Vector> = Vec::with_capacity(s);
        for j in 0..s {
            let tau = t1 + tab.c[j] * h;
            let mut aj = a.clone();
            let mut xj = xs.clone();
            for (m, w) in tab.a[j].iter().enumerate() {
                if *w != 0.0 {
                    aj += &ka[m] * (h * w);
                    if adjoint.replay == Replay::Resolve {
                        xj += &kx[m] * (h * w);
                    }
                }
            }
            let x_tau = match adjoint.replay {
                Replay::StoredStates => curve.eval(tau)?,
                Replay::Resolve => xj,
            };
            let unstable = || Error::AdjointInstability { step: n - 1 - i, t: tau };
            if !all_finite(&aj) || !all_finite(&x_tau) {
                return Err(unstable());
            }
            let da = -model.field_vjp(tau, &x_tau, &aj).map_err(|e| match e {
                Error::Input(_) => unstable(),
                other => other,
            })?;
            if adjoint.replay == Replay::Resolve {
                kx.push(model.vector_field(tau, &x_tau)?);
            }
            kz.push(-&aj);
            ka.push(da);
        }
        for j in 0..s {
            let w = tab.b[j];
            if w != 0.0 {
                a += &ka[j] * (h * w);
                z += &kz[j] * (h * w);
                if adjoint.replay == Replay::Resolve {
                    xs += &kx[j] * (h * w);
                }
            }
        }
        if !all_finite(&a) || !all_finite(&z) {
            return Err(Error::AdjointInstability { step: n - 1 - i, t: t0 });
        }
        if adjoint.replay == Replay::StoredStates {
            xs = forward.states[i].clone();
        }
        states.push(AdjointState {
            t: t0,
            a_x: a.clone(),
            a_z: z.clone(),
        });
    }
    states.reverse();
    Ok(AdjointSolution { states, forward })
}

pub fn otd_grad(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    t: f64,
    x: &Vector,
    adjoint: &AdjointConfig,
) -> Result<GradientEstimate> {
    let sol = otd_adjoint(model, loss, config, t, x, adjoint)?;
    let t_end = *sol.forward.times.last().unwrap();
    let (h_t, h_gamma) = interval(model, t, t_end);
    Ok(GradientEstimate {
        engine: Engine::OtdAdjoint,
        at_time: t,
        grad: sol.initial().a_x.clone(),
        steps_used: config.n_steps,
        estimate_of_x1: Some(sol.forward.terminal().clone()),
        h_t,
        h_gamma,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    /// `grad_x Phi_{s,t}(x) v` for the discrete solve.
    pub jv: Vector,
    pub endpoint: Vector,
    /// Largest relative gap between the two forms of the tangent integrand,
    /// `(b/sigma) J_{x_1|t} w` and `gamma_dot (gamma/sigma) Var w`. Mixture backend only.
    pub integrand_gap: Option<f64>,
}

/// Propagates the tangent `v` through the discrete solve of `config` restricted to `[s, t]`.
/// For Runge-Kutta schemes this is the exact derivative of the discrete map.
pub fn forward_sensitivity(
    model: &PosteriorModel,
    config: &SolverConfig,
    s: f64,
    t: f64,
    x: &Vector,
    v: &Vector,
) -> Result<Sensitivity> {
    let cfg = config.clone().on(s, t);
    let times = cfg.nodes(model)?;
    let sch = model.schedule();
    let analytic = model.is_analytic();
    let mut gap: f64 = 0.0;
    // Tangent of the field at a stage, recording the integrand gap on the way.
    let mut tangent = |tau: f64, xj: &Vector, wj: &Vector| -> Result<Vector> {
        let c = sch.coeffs(tau)?;
        let jw = model.posterior_jvp(tau, xj, wj)?;
        if analytic {
            let snr = sch.snr(tau)?;
            let sigma = sch.sigma(tau);
            let lhs = &jw * (c.b / sigma);
            let rhs = model.posterior_var(tau, xj)? * wj * (snr.gamma_dot * snr.gamma / sigma);
            gap = gap.max((&lhs - &rhs).norm() / lhs.norm().max(1.0));
        }
        Ok(wj * c.a + jw * c.b)
    };
    let mut xs = x.clone();
    let mut w = v.clone();
    for n in 0..cfg.n_steps {
        let (t0, t1) = (times[n], times[n + 1]);
        let h = t1 - t0;
        match cfg.scheme.tableau() {
            Some(tab) => {
                let st = tab.b.len();
                let mut kx: Vec<Vector> = Vec::with_capacity(st);
                let mut kw: Vec<Vector> = Vec::with_capacity(st);
                for j in 0..st {
                    let mut xj = xs.clone();
                    let mut wj = w.clone();
                    for (i, aji) in tab.a[j].iter().enumerate() {
                        if *aji != 0.0 {
                            xj += &kx[i] * (h * aji);
                            wj += &kw[i] * (h * aji);
                        }
                    }
                    let tau = t0 + tab.c[j] * h;
                    kx.push(model.vector_field(tau, &xj)?);
                    kw.push(tangent(tau, &xj, &wj)?);
                }
                for j in 0..st {
                    if tab.b[j] != 0.0 {
                        xs += &kx[j] * (h * tab.b[j]);
                        w += &kw[j] * (h * tab.b[j]);
                    }
                }
            }
            None => {
                let (c_x, c_hat) = exp_euler_coeffs(model, t0, t1);
                let jw = model.posterior_jvp(t0, &xs, &w)?;
                let next = step_with_stages(model, cfg.scheme, t0, t1, &xs, n)?.0;
                w = &w * c_x + jw * c_hat;
                xs = next;
            }
        }
        if !all_finite(&xs) || !all_finite(&w) {
            return Err(Error::Divergence {
                step: n,
                stage: "tangent",
            });
        }
    }
    Ok(Sensitivity {
        jv: w,
        endpoint: xs,
        integrand_gap: analytic.then_some(gap),
    })
}

/// Full Jacobian of the discrete map, one tangent per column.
pub fn forward_jacobian(model: &PosteriorModel, config: &SolverConfig, s: f64, t: f64, x: &Vector) -> Result<Matrix> {
    let d = x.len();
    let mut jac = Matrix::zeros(d, d);
    for i in 0..d {
        let e = Vector::from_fn(d, |r, _| if r == i { 1.0 } else { 0.0 });
        jac.set_column(i, &forward_sensitivity(model, config, s, t, x, &e)?.jv);
    }
    Ok(jac)
}

/// Gradient by forward-mode: `J^T grad L(Phi(x))` with `J` assembled column by column.
pub fn forward_sensitivity_grad(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    t: f64,
    x: &Vector,
) -> Result<GradientEstimate> {
    let t_end = config.t_end.unwrap_or_else(|| model.schedule().t_end());
    let jac = forward_jacobian(model, config, t, t_end, x)?;
    let end = forward_sensitivity(model, config, t, t_end, x, &Vector::zeros(x.len()))?.endpoint;
    let (h_t, h_gamma) = interval(model, t, t_end);
    Ok(GradientEstimate {
        engine: Engine::ForwardSensitivity,
        at_time: t,
        grad: jac.tr_mul(&loss.gradient(&end)),
        steps_used: config.n_steps,
        estimate_of_x1: Some(end),
        h_t,
        h_gamma,
    })
}

/// Sampled control adjoint for `dx/dt = u_t(x) + z(t)` at `z = 0`.
#[derive(Clone, Debug)]
pub struct ControlAdjoint {
    pub times: Vec<f64>,
    pub a_x: Vec<Vector>,
    /// Integrated alongside `a_x` as `da_z/dt = -a_x`, `a_z(T) = 0`.
    pub a_z: Vec<Vector>,
    /// `int_t^T a_x ds` from the cubic Hermite interpolant of the sampled `a_x` curve.
    pub a_z_quadrature: Vec<Vector>,
}

impl ControlAdjoint {
    /// Largest `||a_z - a_z_quadrature||`, relative to `max(1, max ||a_z||)`.
    pub fn quadrature_gap(&self) -> f64 {
        let scale = self.a_z.iter().map(|v| v.norm()).fold(1.0, f64::max);
        self.a_z
            .iter()
            .zip(&self.a_z_quadrature)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale
    }
}

pub fn control_adjoint(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    x0: &Vector,
    adjoint: &AdjointConfig,
) -> Result<ControlAdjoint> {
    let sol = otd_adjoint(model, loss, config, config.t_start, x0, adjoint)?;
    let times: Vec<f64> = sol.states.iter().map(|s| s.t).collect();
    let a_x: Vec<Vector> = sol.states.iter().map(|s| s.a_x.clone()).collect();
    let a_z: Vec<Vector> = sol.states.iter().map(|s| s.a_z.clone()).collect();
    let derivs = times
        .iter()
        .zip(&sol.forward.states)
        .zip(&a_x)
        .map(|((t, x), a)| Ok(-model.field_vjp(*t, x, a)?))
        .collect::<Result<Vec<_>>>()?;
    let curve = HermiteCurve::new(times.clone(), a_x.clone(), derivs)?;
    let a_z_quadrature = curve.tail_integrals();
    Ok(ControlAdjoint {
        times,
        a_x,
        a_z,
        a_z_quadrature,
    })
}

/// Per-step control gradients of an Euler solve with a piecewise-constant additive control:
/// `x_{n+1} = x_n + h_n (u(t_n, x_n) + z_n)`, so `dL/dz_n = h_n * xbar_{n+1}`.
/// Returns `(t_n, h_n, dL/dz_n)` for each step.
pub fn dto_control_gradients(
    model: &PosteriorModel,
    loss: &LossSpec,
    config: &SolverConfig,
    x0: &Vector,
) -> Result<Vec<(f64, f64, Vector)>> {
    if config.scheme != Scheme::Euler {
        return Err(Error::config("solver.scheme", "per-step control gradients use the euler scheme"));
    }
    let traj = solve(model, config, x0)?;
    let cots = backprop_trajectory(model, Scheme::Euler, &traj, &loss.gradient(traj.terminal()))?;
    Ok((0..traj.n_steps())
        .map(|n| {
            let h = traj.times[n + 1] - traj.times[n];
            (traj.times[n], h, &cots[n + 1] * h)
        })
        .collect())
}

/// Where an additive control enters the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPlacement {
    /// Added to the posterior mean: `x_{1|t} + z`.
    Denoiser,
    /// Added to the vector field: `u_t + z`, equivalently `x_{1|t} + z / b_t`.
    VectorField,
}

/// Greedy control gradient: the raw loss gradient at the posterior estimate, divided by `b_t`
/// when the control enters the vector field.
pub fn greedy_control_grad(
    model: &PosteriorModel,
    loss: &LossSpec,
    t: f64,
    x: &Vector,
    placement: ControlPlacement,
) -> Result<Vector> {
    let g = loss.gradient(&model.posterior_mean(t, x)?);
    Ok(match placement {
        ControlPlacement::Denoiser => g,
        ControlPlacement::VectorField => g / model.schedule().coeffs(t)?.b,
    })
}

/// Default dense grid for reference solves that must resolve the stiff end of the interval.
pub fn dense_grid() -> Grid {
    Grid::PolynomialEdm { rho: 7.0 }
}
