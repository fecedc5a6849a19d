//! Affine probability paths `X_t = alpha_t X_1 + sigma_t X_0`.
//!
//! `X_1` is the data variable and `X_0` the Gaussian source. All schedules satisfy
//! `alpha_0 = sigma_1 = 0`, `alpha_1 = sigma_0 = 1`, `alpha_t` increasing and `sigma_t` decreasing.
//! Because `sigma_1 = 0`, every flow is integrated on the truncated domain `[0, 1 - eps]`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default terminal truncation.
pub const DEFAULT_T_EPS: f64 = 1e-3;

/// Slack allowed when a grid node lands a rounding error past a domain boundary.
const DOMAIN_SLACK: f64 = 1e-12;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied schedule with analytic derivatives.
#[derive(Clone)]
pub struct CustomSchedule {
    pub name: String,
    alpha: ScalarFn,
    sigma: ScalarFn,
    alpha_dot: ScalarFn,
    sigma_dot: ScalarFn,
}

impl CustomSchedule {
    pub fn new(
        name: impl Into<String>,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha_dot: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_dot: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            alpha: Arc::new(alpha),
            sigma: Arc::new(sigma),
            alpha_dot: Arc::new(alpha_dot),
            sigma_dot: Arc::new(sigma_dot),
        }
    }

    /// `alpha_t = t^p`, `sigma_t = (1 - t)^q`.
    pub fn power(p: f64, q: f64) -> Result<Self> {
        if !(p > 0.0 && q > 0.0 && p.is_finite() && q.is_finite()) {
            return Err(Error::config(
                "schedule.alpha_power/sigma_power",
                "powers must be positive and finite",
            ));
        }
        Ok(Self::new(
            format!("power(p={p}, q={q})"),
            move |t| t.powf(p),
            move |t| (1.0 - t).powf(q),
            move |t| p * t.powf(p - 1.0),
            move |t| -q * (1.0 - t).powf(q - 1.0),
        ))
    }
}

impl fmt::Debug for CustomSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSchedule")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum ScheduleKind {
    /// `alpha_t = t`, `sigma_t = 1 - t`.
    CondOt,
    /// `alpha_t = sin(pi t / 2)`, `sigma_t = cos(pi t / 2)`, so `alpha^2 + sigma^2 = 1`.
    VariancePreserving,
    Custom(CustomSchedule),
}

/// The semi-linear split `u_t(x) = a_t x + b_t x_{1|t}(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coeffs {
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub t: f64,
    pub gamma: f64,
    pub gamma_dot: f64,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    kind: ScheduleKind,
    t_eps: f64,
}

impl Schedule {
    /// Builds a schedule and checks the boundary, monotonicity and SNR invariants on a dense
    /// sample of the domain.
    pub fn new(kind: ScheduleKind, t_eps: f64) -> Result<Self> {
        if !(t_eps > 0.0 && t_eps <= 0.1) {
            return Err(Error::config("schedule.t_eps", format!("must lie in (0, 0.1], got {t_eps}")));
        }
        let s = Self { kind, t_eps };
        s.validate()?;
        Ok(s)
    }

    pub fn cond_ot() -> Self {
        Self::new(ScheduleKind::CondOt, DEFAULT_T_EPS).expect("built-in schedule is valid")
    }

    pub fn variance_preserving() -> Self {
        Self::new(ScheduleKind::VariancePreserving, DEFAULT_T_EPS).expect("built-in schedule is valid")
    }

    pub fn with_t_eps(&self, t_eps: f64) -> Result<Self> {
        Self::new(self.kind.clone(), t_eps)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config("schedule", msg));
        let boundary = [
            ("alpha(0)", self.alpha(0.0), 0.0),
            ("sigma(1)", self.sigma(1.0), 0.0),
            ("alpha(1)", self.alpha(1.0), 1.0),
            ("sigma(0)", self.sigma(0.0), 1.0),
        ];
        for (name, got, want) in boundary {
            if (got - want).abs() > 1e-12 {
                return bad(format!("{name} = {got}, expected {want}"));
            }
        }
        let n = 2000;
        let mut prev_gamma = f64::NEG_INFINITY;
        for i in 1..n {
            let t = i as f64 / n as f64;
            if !(self.alpha_dot(t) > 0.0) || !(self.sigma_dot(t) < 0.0) {
                return bad(format!("alpha must increase and sigma decrease at t = {t}"));
            }
            if t <= self.t_end() {
                let g = self.gamma(t);
                if !(g > prev_gamma) {
                    return bad(format!("gamma is not strictly increasing at t = {t}"));
                }
                prev_gamma = g;
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn name(&self) -> String {
        match &self.kind {
            ScheduleKind::CondOt => "cond_ot".into(),
            ScheduleKind::VariancePreserving => "variance_preserving".into(),
            ScheduleKind::Custom(c) => c.name.clone(),
        }
    }

    pub fn t_eps(&self) -> f64 {
        self.t_eps
    }

    /// Right end of the integration domain, `1 - eps`.
    pub fn t_end(&self) -> f64 {
        1.0 - self.t_eps
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::CondOt => t,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * t).sin(),
            ScheduleKind::Custom(c) => (c.alpha)(t),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::CondOt => 1.0 - t,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * t).cos(),
            ScheduleKind::Custom(c) => (c.sigma)(t),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::CondOt => 1.0,
            ScheduleKind::VariancePreserving => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
            ScheduleKind::Custom(c) => (c.alpha_dot)(t),
        }
    }

    pub fn sigma_dot(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::CondOt => -1.0,
            ScheduleKind::VariancePreserving => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            ScheduleKind::Custom(c) => (c.sigma_dot)(t),
        }
    }

    /// `gamma_t = alpha_t / sigma_t` without domain checks.
    pub fn gamma(&self, t: f64) -> f64 {
        self.alpha(t) / self.sigma(t)
    }

    /// Rejects `t` outside `[0, 1 - eps]` (up to rounding slack) and clamps the slack away.
    pub fn check_time(&self, t: f64) -> Result<f64> {
        let hi = self.t_end();
        if !t.is_finite() || t < -DOMAIN_SLACK || t > hi + DOMAIN_SLACK {
            return Err(Error::Domain { t, lo: 0.0, hi });
        }
        Ok(t.clamp(0.0, hi))
    }

    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        let t = self.check_time(t)?;
        let sigma = self.sigma(t);
        if sigma < 1e-12 {
            return Err(Error::Domain { t, lo: 0.0, hi: self.t_end() });
        }
        let a = self.sigma_dot(t) / sigma;
        let b = self.alpha_dot(t) - self.alpha(t) * a;
        Ok(Coeffs { a, b })
    }

    pub fn snr(&self, t: f64) -> Result<SnrPoint> {
        let t = self.check_time(t)?;
        let (alpha, sigma) = (self.alpha(t), self.sigma(t));
        // Quotient rule; `b_t / sigma_t` is the same quantity by a different route.
        let gamma_dot = (self.alpha_dot(t) * sigma - alpha * self.sigma_dot(t)) / (sigma * sigma);
        Ok(SnrPoint {
            t,
            gamma: alpha / sigma,
            gamma_dot,
        })
    }

    /// The inverse map `t_gamma` on `[0, gamma(1 - eps)]`.
    pub fn snr_inverse(&self, gamma: f64) -> Result<f64> {
        let hi = self.gamma(self.t_end());
        if !gamma.is_finite() || gamma < -DOMAIN_SLACK || gamma > hi * (1.0 + 1e-12) {
            return Err(Error::Range {
                what: "gamma",
                value: gamma,
                lo: 0.0,
                hi,
            });
        }
        let gamma = gamma.clamp(0.0, hi);
        let t = match &self.kind {
            ScheduleKind::CondOt => gamma / (1.0 + gamma),
            ScheduleKind::VariancePreserving => gamma.atan() / FRAC_PI_2,
            ScheduleKind::Custom(_) => self.bisect_gamma(gamma),
        };
        Ok(t.min(self.t_end()))
    }

    fn bisect_gamma(&self, gamma: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, self.t_end());
        for _ in 0..200 {
            if hi - lo <= 1e-15 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.gamma(mid) < gamma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}
