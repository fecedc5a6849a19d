//! Fixed-grid integration of `dx/dt = u_t(x)` in `t` and in `gamma`.

mod grid;
mod hermite;
pub mod quadrature;

pub use grid::{build_grid, Grid};
pub use hermite::HermiteCurve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Vector};
use crate::models::{Backend, PosteriorModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Midpoint,
    Rk4,
    /// First-order exponential integrator: the linear part is integrated exactly.
    ExpEuler,
    /// Euler on the reparameterised state `y = x / sigma_t` in the `gamma` variable.
    ReparamGammaEuler,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4 => "rk4",
            Scheme::ExpEuler => "exp_euler",
            Scheme::ReparamGammaEuler => "reparam_gamma_euler",
        }
    }

    /// Classical order of the scheme.
    pub fn order(self) -> u32 {
        match self {
            Scheme::Euler | Scheme::ExpEuler | Scheme::ReparamGammaEuler => 1,
            Scheme::Midpoint => 2,
            Scheme::Rk4 => 4,
        }
    }

    /// Exponential schemes never evaluate the model at the step end, so they may step to `t = 1`.
    pub fn is_exponential(self) -> bool {
        matches!(self, Scheme::ExpEuler | Scheme::ReparamGammaEuler)
    }

    pub(crate) fn tableau(self) -> Option<&'static Tableau> {
        match self {
            Scheme::Euler => Some(&EULER),
            Scheme::Midpoint => Some(&MIDPOINT),
            Scheme::Rk4 => Some(&RK4),
            Scheme::ExpEuler | Scheme::ReparamGammaEuler => None,
        }
    }
}

/// Explicit Runge-Kutta coefficients; `a[j]` holds the weights of stages `0..j`.
pub(crate) struct Tableau {
    pub c: &'static [f64],
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
}

static EULER: Tableau = Tableau {
    c: &[0.0],
    a: &[&[]],
    b: &[1.0],
};

static MIDPOINT: Tableau = Tableau {
    c: &[0.0, 0.5],
    a: &[&[], &[0.5]],
    b: &[0.0, 1.0],
};

static RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

const STAGE_LABELS: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub n_steps: usize,
    pub grid: Grid,
    pub t_start: f64,
    /// `None` means the schedule's `1 - eps`.
    pub t_end: Option<f64>,
    /// Keep per-step stage inputs for reverse-mode replay.
    pub store_stages: bool,
}

impl SolverConfig {
    pub fn new(scheme: Scheme, n_steps: usize) -> Self {
        Self {
            scheme,
            n_steps,
            grid: Grid::UniformT,
            t_start: 0.0,
            t_end: None,
            store_stages: false,
        }
    }

    pub fn with_grid(mut self, grid: Grid) -> Self {
        self.grid = grid;
        self
    }

    pub fn on(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = t_start;
        self.t_end = Some(t_end);
        self
    }

    pub fn from_time(mut self, t_start: f64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn storing_stages(mut self) -> Self {
        self.store_stages = true;
        self
    }

    /// Validated grid nodes for this configuration.
    pub fn nodes(&self, model: &PosteriorModel) -> Result<Vec<f64>> {
        let schedule = model.schedule();
        let t_end = self.t_end.unwrap_or_else(|| schedule.t_end());
        let limit = schedule.t_end();
        if t_end > limit + 1e-12 {
            // Only exponential steps on a plain grid may reach past the truncation, up to t = 1.
            let allowed = self.scheme == Scheme::ExpEuler && self.grid == Grid::UniformT && t_end <= 1.0;
            if !allowed {
                return Err(Error::config(
                    "solver.t_end",
                    format!("{t_end} exceeds the truncated domain end {limit}"),
                ));
            }
        }
        build_grid(schedule, self.grid, self.n_steps, self.t_start, t_end)
    }
}

/// Ordered states of a forward solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// `stages[n][j]` is the input state of stage `j` in step `n`.
    pub stages: Option<Vec<Vec<Vector>>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Vector {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// One step of `scheme` from `(t0, x)` to `t1`, also returning the stage inputs.
pub(crate) fn step_with_stages(
    model: &PosteriorModel,
    scheme: Scheme,
    t0: f64,
    t1: f64,
    x: &Vector,
    index: usize,
) -> Result<(Vector, Vec<Vector>)> {
    if !(t1 > t0) {
        return Err(Error::Input(format!("step needs t1 > t0, got {t0} -> {t1}")));
    }
    let s = model.schedule();
    let h = t1 - t0;
    let out = match scheme.tableau() {
        Some(tab) => {
            let mut ks: Vec<Vector> = Vec::with_capacity(tab.b.len());
            let mut inputs = Vec::with_capacity(tab.b.len());
            for j in 0..tab.b.len() {
                let mut xj = x.clone();
                for (i, aji) in tab.a[j].iter().enumerate() {
                    if *aji != 0.0 {
                        xj += &ks[i] * (h * aji);
                    }
                }
                if !all_finite(&xj) {
                    return Err(Error::Divergence {
                        step: index,
                        stage: STAGE_LABELS[j],
                    });
                }
                let k = model
                    .vector_field(t0 + tab.c[j] * h, &xj)
                    .map_err(|e| at_step(e, index, STAGE_LABELS[j]))?;
                if !all_finite(&k) {
                    return Err(Error::Divergence {
                        step: index,
                        stage: STAGE_LABELS[j],
                    });
                }
                ks.push(k);
                inputs.push(xj);
            }
            let mut next = x.clone();
            for (k, bj) in ks.iter().zip(tab.b) {
                if *bj != 0.0 {
                    next += k * (h * bj);
                }
            }
            (next, inputs)
        }
        None => {
            if t1 > 1.0 || (scheme == Scheme::ReparamGammaEuler && t1 > s.t_end() + 1e-12) {
                return Err(Error::Domain { t: t1, lo: 0.0, hi: 1.0 });
            }
            s.check_time(t0)?;
            let xhat = model.posterior_mean(t0, x).map_err(|e| at_step(e, index, "posterior"))?;
            if !all_finite(&xhat) {
                return Err(Error::Divergence {
                    step: index,
                    stage: "posterior",
                });
            }
            let next = match scheme {
                Scheme::ExpEuler => {
                    let (c_x, c_hat) = exp_euler_coeffs(model, t0, t1);
                    x * c_x + xhat * c_hat
                }
                _ => {
                    let (g0, g1) = (s.gamma(t0), s.gamma(t1));
                    let y = x / s.sigma(t0) + xhat * (g1 - g0);
                    y * s.sigma(t1)
                }
            };
            (next, vec![x.clone()])
        }
    };
    if !all_finite(&out.0) {
        return Err(Error::Divergence {
            step: index,
            stage: "update",
        });
    }
    Ok(out)
}

fn at_step(e: Error, step: usize, stage: &'static str) -> Error {
    match e {
        Error::Divergence { .. } => Error::Divergence { step, stage },
        other => other,
    }
}

/// `(sigma_t / sigma_s, alpha_t - sigma_t alpha_s / sigma_s)`, the exponential-Euler weights.
pub(crate) fn exp_euler_coeffs(model: &PosteriorModel, s: f64, t: f64) -> (f64, f64) {
    let sch = model.schedule();
    let ratio = sch.sigma(t) / sch.sigma(s);
    (ratio, sch.alpha(t) - ratio * sch.alpha(s))
}

pub fn step(model: &PosteriorModel, scheme: Scheme, t0: f64, t1: f64, x: &Vector) -> Result<Vector> {
    Ok(step_with_stages(model, scheme, t0, t1, x, 0)?.0)
}

pub fn solve(model: &PosteriorModel, config: &SolverConfig, x0: &Vector) -> Result<Trajectory> {
    if x0.len() != model.dim() || !all_finite(x0) {
        return Err(Error::Input("initial state must be finite with the model dimension".into()));
    }
    let times = config.nodes(model)?;
    let mut states = Vec::with_capacity(times.len());
    let mut stages = config.store_stages.then(|| Vec::with_capacity(config.n_steps));
    states.push(x0.clone());
    for n in 0..config.n_steps {
        let (next, st) = step_with_stages(model, config.scheme, times[n], times[n + 1], &states[n], n)?;
        if let Some(s) = stages.as_mut() {
            s.push(st);
        }
        states.push(next);
    }
    Ok(Trajectory { times, states, stages })
}

/// Integrates `y = x / sigma_t` in the `gamma` variable, `dy/dgamma = x_{1|t_gamma}(sigma y)`,
/// on the `gamma` images of the configured grid, and maps the states back to `x`.
///
/// Euler-family schemes become Euler in `gamma`; midpoint and RK4 keep their tableaux.
pub fn solve_reparam_gamma(model: &PosteriorModel, config: &SolverConfig, x0: &Vector) -> Result<Trajectory> {
    let s = model.schedule();
    if let Some(t_end) = config.t_end {
        if t_end > s.t_end() + 1e-12 {
            return Err(Error::Range {
                what: "gamma",
                value: f64::INFINITY,
                lo: 0.0,
                hi: s.gamma(s.t_end()),
            });
        }
    }
    if x0.len() != model.dim() || !all_finite(x0) {
        return Err(Error::Input("initial state must be finite with the model dimension".into()));
    }
    let times = config.nodes(model)?;
    let gammas: Vec<f64> = times.iter().map(|t| s.gamma(*t)).collect();
    let tab = match config.scheme {
        Scheme::Midpoint => &MIDPOINT,
        Scheme::Rk4 => &RK4,
        _ => &EULER,
    };
    // Right-hand side at a stage: grid nodes reuse their exact time, off-grid stages invert gamma.
    let rhs = |gamma: f64, t_hint: Option<f64>, y: &Vector| -> Result<Vector> {
        let t = match t_hint {
            Some(t) => t,
            None => s.snr_inverse(gamma)?,
        };
        model.posterior_mean(t, &(y * s.sigma(t)))
    };
    let mut y = x0 / s.sigma(times[0]);
    let mut states = vec![x0.clone()];
    for n in 0..config.n_steps {
        let (g0, g1) = (gammas[n], gammas[n + 1]);
        let h = g1 - g0;
        let mut ks: Vec<Vector> = Vec::with_capacity(tab.b.len());
        for j in 0..tab.b.len() {
            let mut yj = y.clone();
            for (i, aji) in tab.a[j].iter().enumerate() {
                if *aji != 0.0 {
                    yj += &ks[i] * (h * aji);
                }
            }
            let hint = if tab.c[j] == 0.0 {
                Some(times[n])
            } else if tab.c[j] == 1.0 {
                Some(times[n + 1])
            } else {
                None
            };
            let k = rhs(g0 + tab.c[j] * h, hint, &yj).map_err(|e| match e {
                Error::Input(_) => Error::Divergence {
                    step: n,
                    stage: STAGE_LABELS[j],
                },
                other => other,
            })?;
            ks.push(k);
        }
        for (k, bj) in ks.iter().zip(tab.b) {
            if *bj != 0.0 {
                y += k * (h * bj);
            }
        }
        let x = &y * s.sigma(times[n + 1]);
        if !all_finite(&x) {
            return Err(Error::Divergence {
                step: n,
                stage: "update",
            });
        }
        states.push(x);
    }
    Ok(Trajectory {
        times,
        states,
        stages: None,
    })
}

/// A dense forward solve kept for interpolation at arbitrary times.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub trajectory: Trajectory,
    pub curve: HermiteCurve,
}

impl DenseSolution {
    pub fn new(model: &PosteriorModel, config: &SolverConfig, x0: &Vector) -> Result<Self> {
        let trajectory = solve(model, config, x0)?;
        let derivs = trajectory
            .times
            .iter()
            .zip(&trajectory.states)
            .map(|(t, x)| model.vector_field(*t, x))
            .collect::<Result<Vec<_>>>()?;
        let curve = HermiteCurve::new(trajectory.times.clone(), trajectory.states.clone(), derivs)?;
        Ok(Self { trajectory, curve })
    }

    pub fn state(&self, t: f64) -> Result<Vector> {
        self.curve.eval(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    /// Steps of the RK4 reference solve that supplies the integrand's states.
    pub dense_steps: usize,
    pub max_intervals: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            dense_steps: 2048,
            max_intervals: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// `(sigma_t / sigma_s) x_s + sigma_t int_{gamma_s}^{gamma_t} x_{1|gamma}(x_gamma) dgamma`.
    pub value: Vector,
    /// Endpoint of the dense solve the integrand was evaluated along.
    pub dense_endpoint: Vector,
    pub error_estimate: f64,
}

impl Reconstruction {
    pub fn residual(&self) -> f64 {
        (&self.value - &self.dense_endpoint).norm()
    }
}

/// Evaluates the exponential-integrator form of the exact flow from `s` to `t` by quadrature in
/// `gamma` along a dense RK4 solution.
pub fn exact_solution_quadrature(
    model: &PosteriorModel,
    s: f64,
    t: f64,
    x_s: &Vector,
    cfg: &QuadratureConfig,
) -> Result<Reconstruction> {
    if !matches!(model.backend(), Backend::AnalyticMixture(_)) {
        return Err(Error::Unsupported("exact_solution_quadrature"));
    }
    let sch = model.schedule();
    let s = sch.check_time(s)?;
    let t = sch.check_time(t)?;
    if t < s {
        return Err(Error::Input(format!("need s <= t, got s = {s}, t = {t}")));
    }
    if t == s {
        return Ok(Reconstruction {
            value: x_s.clone(),
            dense_endpoint: x_s.clone(),
            error_estimate: 0.0,
        });
    }
    let config = SolverConfig::new(Scheme::Rk4, cfg.dense_steps)
        .with_grid(Grid::PolynomialEdm { rho: 7.0 })
        .on(s, t);
    let dense = DenseSolution::new(model, &config, x_s)?;
    let (gs, gt) = (sch.gamma(s), sch.gamma(t));
    let integrand = |gamma: f64| -> Result<Vector> {
        let tau = sch.snr_inverse(gamma)?.clamp(s, t);
        model.posterior_mean(tau, &dense.state(tau)?)
    };
    let (integral, err) = quadrature::integrate(integrand, gs, gt, cfg.abs_tol, cfg.max_intervals)?;
    let value = x_s * (sch.sigma(t) / sch.sigma(s)) + integral * sch.sigma(t);
    Ok(Reconstruction {
        value,
        dense_endpoint: dense.trajectory.terminal().clone(),
        error_estimate: err * sch.sigma(t),
    })
}
