//! Posterior-mean backends and the vector field they induce, `u_t(x) = a_t x + b_t x_{1|t}(x)`.

pub mod mixture;
pub mod mlp;

pub use mixture::{GaussianMixtureTarget, MixturePosterior};
pub use mlp::{train_micro_mlp, MicroMlp, MlpMode, MlpSpec, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix, Vector};
use crate::paths::Schedule;

#[derive(Clone, Debug)]
pub enum Backend {
    /// Exact posterior of a Gaussian-mixture target: a model trained to zero loss.
    AnalyticMixture(GaussianMixtureTarget),
    MicroMlp(MicroMlp),
}

#[derive(Clone, Debug)]
pub struct PosteriorModel {
    schedule: Schedule,
    backend: Backend,
}

impl PosteriorModel {
    pub fn new(schedule: Schedule, backend: Backend) -> Self {
        Self { schedule, backend }
    }

    pub fn mixture(schedule: Schedule, target: GaussianMixtureTarget) -> Self {
        Self::new(schedule, Backend::AnalyticMixture(target))
    }

    pub fn mlp(schedule: Schedule, net: MicroMlp) -> Self {
        Self::new(schedule, Backend::MicroMlp(net))
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.backend, Backend::AnalyticMixture(_))
    }

    /// Same backend under a different schedule (typically a different truncation).
    pub fn with_schedule(&self, schedule: Schedule) -> Self {
        Self::new(schedule, self.backend.clone())
    }

    pub fn dim(&self) -> usize {
        match &self.backend {
            Backend::AnalyticMixture(g) => g.dim(),
            Backend::MicroMlp(n) => n.dim(),
        }
    }

    fn check(&self, t: f64, x: &Vector) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !all_finite(x) {
            return Err(Error::Input("state contains non-finite entries".into()));
        }
        self.schedule.check_time(t)
    }

    fn check_direction(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim() || !all_finite(v) {
            return Err(Error::Input("direction must be finite with the model dimension".into()));
        }
        Ok(())
    }

    pub fn posterior_mean(&self, t: f64, x: &Vector) -> Result<Vector> {
        let t = self.check(t, x)?;
        match &self.backend {
            Backend::AnalyticMixture(g) => {
                Ok(g.evaluate(self.schedule.alpha(t), self.schedule.sigma(t), x)?.mean)
            }
            Backend::MicroMlp(net) => {
                let out = net.forward(t, x);
                match net.mode() {
                    MlpMode::TargetPrediction => Ok(out),
                    MlpMode::DirectField => {
                        let c = self.schedule.coeffs(t)?;
                        Ok((out - x * c.a) / c.b)
                    }
                }
            }
        }
    }

    pub fn posterior_var(&self, t: f64, x: &Vector) -> Result<Matrix> {
        let t = self.check(t, x)?;
        match &self.backend {
            Backend::AnalyticMixture(g) => {
                Ok(g.evaluate(self.schedule.alpha(t), self.schedule.sigma(t), x)?.variance())
            }
            Backend::MicroMlp(_) => Err(Error::Unsupported("posterior_var")),
        }
    }

    /// Posterior mean and its Jacobian from a single evaluation.
    pub fn posterior_mean_and_jacobian(&self, t: f64, x: &Vector) -> Result<(Vector, Matrix)> {
        let t = self.check(t, x)?;
        match &self.backend {
            Backend::AnalyticMixture(g) => {
                let p = g.evaluate(self.schedule.alpha(t), self.schedule.sigma(t), x)?;
                let jac = p.jacobian();
                Ok((p.mean, jac))
            }
            Backend::MicroMlp(net) => {
                let out = net.forward(t, x);
                let jac = net.jacobian(t, x);
                match net.mode() {
                    MlpMode::TargetPrediction => Ok((out, jac)),
                    MlpMode::DirectField => {
                        let c = self.schedule.coeffs(t)?;
                        let d = self.dim();
                        Ok(((out - x * c.a) / c.b, (jac - Matrix::identity(d, d) * c.a) / c.b))
                    }
                }
            }
        }
    }

    pub fn posterior_jacobian(&self, t: f64, x: &Vector) -> Result<Matrix> {
        Ok(self.posterior_mean_and_jacobian(t, x)?.1)
    }

    pub fn posterior_jvp(&self, t: f64, x: &Vector, v: &Vector) -> Result<Vector> {
        self.check_direction(v)?;
        match &self.backend {
            Backend::MicroMlp(net) => {
                let t = self.check(t, x)?;
                let jv = net.jvp(t, x, v);
                match net.mode() {
                    MlpMode::TargetPrediction => Ok(jv),
                    MlpMode::DirectField => {
                        let c = self.schedule.coeffs(t)?;
                        Ok((jv - v * c.a) / c.b)
                    }
                }
            }
            Backend::AnalyticMixture(_) => Ok(self.posterior_jacobian(t, x)? * v),
        }
    }

    pub fn posterior_vjp(&self, t: f64, x: &Vector, w: &Vector) -> Result<Vector> {
        self.check_direction(w)?;
        match &self.backend {
            Backend::MicroMlp(net) => {
                let t = self.check(t, x)?;
                let wj = net.vjp(t, x, w);
                match net.mode() {
                    MlpMode::TargetPrediction => Ok(wj),
                    MlpMode::DirectField => {
                        let c = self.schedule.coeffs(t)?;
                        Ok((wj - w * c.a) / c.b)
                    }
                }
            }
            Backend::AnalyticMixture(_) => Ok(self.posterior_jacobian(t, x)?.tr_mul(w)),
        }
    }

    pub fn vector_field(&self, t: f64, x: &Vector) -> Result<Vector> {
        let t = self.check(t, x)?;
        if let Backend::MicroMlp(net) = &self.backend {
            if net.mode() == MlpMode::DirectField {
                return Ok(net.forward(t, x));
            }
        }
        let c = self.schedule.coeffs(t)?;
        Ok(x * c.a + self.posterior_mean(t, x)? * c.b)
    }

    /// `du/dx = a_t I + b_t d x_{1|t}/dx`.
    pub fn field_jacobian(&self, t: f64, x: &Vector) -> Result<Matrix> {
        let t = self.check(t, x)?;
        if let Backend::MicroMlp(net) = &self.backend {
            if net.mode() == MlpMode::DirectField {
                return Ok(net.jacobian(t, x));
            }
        }
        let c = self.schedule.coeffs(t)?;
        let d = self.dim();
        Ok(Matrix::identity(d, d) * c.a + self.posterior_jacobian(t, x)? * c.b)
    }

    pub fn field_jvp(&self, t: f64, x: &Vector, v: &Vector) -> Result<Vector> {
        let t = self.check(t, x)?;
        self.check_direction(v)?;
        if let Backend::MicroMlp(net) = &self.backend {
            if net.mode() == MlpMode::DirectField {
                return Ok(net.jvp(t, x, v));
            }
        }
        let c = self.schedule.coeffs(t)?;
        Ok(v * c.a + self.posterior_jvp(t, x, v)? * c.b)
    }

    pub fn field_vjp(&self, t: f64, x: &Vector, w: &Vector) -> Result<Vector> {
        let t = self.check(t, x)?;
        self.check_direction(w)?;
        if let Backend::MicroMlp(net) = &self.backend {
            if net.mode() == MlpMode::DirectField {
                return Ok(net.vjp(t, x, w));
            }
        }
        let c = self.schedule.coeffs(t)?;
        Ok(w * c.a + self.posterior_vjp(t, x, w)? * c.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, standard_normal};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    fn dirac(mu: Vector) -> PosteriorModel {
        PosteriorModel::mixture(Schedule::cond_ot(), GaussianMixtureTarget::dirac(mu).unwrap())
    }

    fn random_model(seed: u64, dim: usize) -> PosteriorModel {
        let mut rng = seeded_rng(seed);
        PosteriorModel::mixture(Schedule::cond_ot(), GaussianMixtureTarget::random(&mut rng, dim, 3).unwrap())
    }

    #[test]
    fn dirac_posterior_is_the_point() {
        let m = dirac(v2(1.0, 0.0));
        for &t in &[0.0, 0.3, 0.9, 0.999] {
            let x = v2(3.0, -2.0);
            assert_abs_diff_eq!(m.posterior_mean(t, &x).unwrap(), v2(1.0, 0.0), epsilon = 1e-6);
            assert!(m.posterior_var(t, &x).unwrap().amax() < 1e-8);
            assert!(m.posterior_vjp(t, &x, &v2(1.0, 1.0)).unwrap().amax() < 1e-6);
        }
    }

    #[test]
    fn standard_normal_examples() {
        let m = PosteriorModel::mixture(Schedule::cond_ot(), GaussianMixtureTarget::standard_normal(2).unwrap());
        let x = v2(0.3, -0.7);
        assert_abs_diff_eq!(m.posterior_mean(0.5, &x).unwrap(), x, epsilon = 1e-14);
        assert_abs_diff_eq!(m.posterior_var(0.5, &x).unwrap(), Matrix::identity(2, 2) * 0.5, epsilon = 1e-14);
        let v = v2(0.25, 4.0);
        assert_abs_diff_eq!(m.posterior_jvp(0.5, &x, &v).unwrap(), v, epsilon = 1e-13);
    }

    #[test]
    fn separated_pair_collapses_near_the_end() {
        let m = PosteriorModel::mixture(
            Schedule::cond_ot(),
            GaussianMixtureTarget::symmetric_pair(v2(2.0, 0.0), 1.0).unwrap(),
        );
        let t = m.schedule().t_end();
        let x = v2(2.0, 0.0);
        // Oracle: responsibilities computed directly from the two marginal densities.
        let (a, s) = (m.schedule().alpha(t), m.schedule().sigma(t));
        let var = a * a + s * s;
        let logp = |mu: f64| -((x[0] - a * mu).powi(2) + x[1] * x[1]) / (2.0 * var);
        let r_plus = 1.0 / (1.0 + (logp(-2.0) - logp(2.0)).exp());
        let m_plus = 2.0 + a / var * (x[0] - a * 2.0);
        let m_minus = -2.0 + a / var * (x[0] + a * 2.0);
        let expected = r_plus * m_plus + (1.0 - r_plus) * m_minus;
        let got = m.posterior_mean(t, &x).unwrap();
        assert!((got[0] - expected).abs() < 1e-12);
        // Both component means sit within O(eps) of x here, so the mixture does too.
        assert!((got - v2(2.0, 0.0)).norm() < 3.0 * m.schedule().t_eps());
    }

    #[test]
    fn monte_carlo_oracle_for_posterior_mean() {
        // Self-normalised importance sampling: draw X_1 from the prior, weight by the likelihood
        // N(x; alpha X_1, sigma^2 I). Tolerance: 3 standard errors of the weighted estimator.
        let mut rng = seeded_rng(41);
        let target = GaussianMixtureTarget::random(&mut rng, 2, 2).unwrap();
        let m = PosteriorModel::mixture(Schedule::cond_ot(), target.clone());
        let n = 1_000_000;
        let samples: Vec<Vector> = (0..n).map(|_| target.sample(&mut rng)).collect();
        for _ in 0..10 {
            let t: f64 = rng.random_range(0.1..0.6);
            let x1 = target.sample(&mut rng);
            let x = &x1 * t + standard_normal(&mut rng, 2) * (1.0 - t);
            let (a, s) = (m.schedule().alpha(t), m.schedule().sigma(t));
            let logw: Vec<f64> = samples
                .iter()
                .map(|y| -(&x - y * a).norm_squared() / (2.0 * s * s))
                .collect();
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
            let wsum: f64 = w.iter().sum();
            let mut est = Vector::zeros(2);
            for (wi, y) in w.iter().zip(&samples) {
                est += y * (*wi / wsum);
            }
            let exact = m.posterior_mean(t, &x).unwrap();
            let ess = wsum * wsum / w.iter().map(|v| v * v).sum::<f64>();
            for c in 0..2 {
                let var: f64 = w
                    .iter()
                    .zip(&samples)
                    .map(|(wi, y)| wi / wsum * (y[c] - est[c]).powi(2))
                    .sum();
                let se = (var / ess).sqrt();
                assert!(
                    (est[c] - exact[c]).abs() <= 3.0 * se + 1e-12,
                    "t={t} c={c} est={} exact={} se={se}",
                    est[c],
                    exact[c]
                );
            }
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = seeded_rng(8);
        for seed in 0..5 {
            let m = random_model(seed, 4);
            for _ in 0..10 {
                let t: f64 = rng.random_range(0.05..0.95);
                let x = standard_normal(&mut rng, 4);
                let v = standard_normal(&mut rng, 4);
                let h = 1e-5;
                let fd = (m.posterior_mean(t, &(&x + &v * h)).unwrap()
                    - m.posterior_mean(t, &(&x - &v * h)).unwrap())
                    / (2.0 * h);
                let jvp = m.posterior_jvp(t, &x, &v).unwrap();
                assert!((&jvp - &fd).norm() <= 1e-5 * fd.norm().max(1e-3), "{jvp} vs {fd}");
            }
        }
    }

    #[test]
    fn jacobian_is_proportional_to_variance() {
        let mut rng = seeded_rng(12);
        for seed in 0..4 {
            let m = random_model(100 + seed, 3);
            for _ in 0..25 {
                let t: f64 = rng.random_range(0.05..0.95);
                let x = standard_normal(&mut rng, 3) * 2.0;
                let (a, s) = (m.schedule().alpha(t), m.schedule().sigma(t));
                let jac = m.posterior_jacobian(t, &x).unwrap();
                let var = m.posterior_var(t, &x).unwrap();
                let resid = (&jac - &var * (a / (s * s))).norm();
                assert!(resid <= 1e-9 * (1.0 + var.norm()), "residual {resid}");
            }
        }
    }

    #[test]
    fn vector_field_examples() {
        // Straight-line flow towards a point mass: x_t = (1 - t) x0 + t mu, so u = mu - x0.
        let m = dirac(v2(2.0, 0.0));
        let x = v2(0.0, 0.0) * 0.5 + v2(2.0, 0.0) * 0.5;
        assert_abs_diff_eq!(m.vector_field(0.5, &x).unwrap(), v2(2.0, 0.0), epsilon = 1e-8);
        let m = dirac(v2(0.0, 0.0));
        assert_abs_diff_eq!(m.vector_field(0.0, &v2(1.0, 1.0)).unwrap(), v2(-1.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn mlp_direct_field_is_passed_through() {
        let net = MicroMlp::init(&MlpSpec {
            dim: 2,
            hidden1: 6,
            hidden2: 6,
            mode: MlpMode::DirectField,
            seed: 1,
        })
        .unwrap();
        let m = PosteriorModel::mlp(Schedule::cond_ot(), net.clone());
        let x = v2(0.4, -0.3);
        assert_eq!(m.vector_field(0.3, &x).unwrap(), net.forward(0.3, &x));
        assert!(matches!(m.posterior_var(0.3, &x), Err(Error::Unsupported(_))));
        // The posterior mean is recovered by inverting the affine split.
        let c = m.schedule().coeffs(0.3).unwrap();
        let xhat = m.posterior_mean(0.3, &x).unwrap();
        assert_abs_diff_eq!(&x * c.a + xhat * c.b, net.forward(0.3, &x), epsilon = 1e-12);
    }

    #[test]
    fn mlp_posterior_vjp_matches_differences() {
        for mode in [MlpMode::DirectField, MlpMode::TargetPrediction] {
            let net = MicroMlp::init(&MlpSpec {
                dim: 3,
                hidden1: 8,
                hidden2: 8,
                mode,
                seed: 2,
            })
            .unwrap();
            let m = PosteriorModel::mlp(Schedule::cond_ot(), net);
            let mut rng = seeded_rng(4);
            for _ in 0..20 {
                let t: f64 = rng.random_range(0.0..0.9);
                let x = standard_normal(&mut rng, 3);
                let (v, w) = (standard_normal(&mut rng, 3), standard_normal(&mut rng, 3));
                let h = 1e-5;
                let fd = (m.posterior_mean(t, &(&x + &v * h)).unwrap()
                    - m.posterior_mean(t, &(&x - &v * h)).unwrap())
                    / (2.0 * h);
                let lhs = w.dot(&fd);
                let rhs = m.posterior_vjp(t, &x, &w).unwrap().dot(&v);
                assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1e-3));
                let fj = m.field_jvp(t, &x, &v).unwrap();
                let fv = m.field_vjp(t, &x, &w).unwrap();
                assert!((w.dot(&fj) - fv.dot(&v)).abs() <= 1e-10 * fj.norm().max(1.0) * w.norm());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = dirac(v2(1.0, 0.0));
        assert!(matches!(m.posterior_mean(0.5, &v2(f64::NAN, 0.0)), Err(Error::Input(_))));
        assert!(matches!(m.posterior_mean(0.5, &Vector::zeros(3)), Err(Error::Input(_))));
        assert!(matches!(m.posterior_mean(1.0, &v2(0.0, 0.0)), Err(Error::Domain { .. })));
    }

    proptest::proptest! {
        #[test]
        fn prop_vjp_is_adjoint_of_jvp(seed in 0u64..1000, t in 0.01f64..0.99) {
            let m = random_model(seed, 3);
            let mut rng = seeded_rng(seed ^ 0xabc);
            let x = standard_normal(&mut rng, 3);
            let v = standard_normal(&mut rng, 3);
            let w = standard_normal(&mut rng, 3);
            let lhs = m.posterior_vjp(t, &x, &w).unwrap().dot(&v);
            let rhs = m.posterior_jvp(t, &x, &v).unwrap().dot(&w);
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
        }

        #[test]
        fn prop_variance_is_symmetric_psd(seed in 0u64..1000, t in 0.0f64..0.999) {
            let m = random_model(seed, 3);
            let mut rng = seeded_rng(seed);
            let x = standard_normal(&mut rng, 3) * 3.0;
            let var = m.posterior_var(t, &x).unwrap();
            proptest::prop_assert!((&var - var.transpose()).amax() == 0.0);
            let eig = var.symmetric_eigenvalues();
            proptest::prop_assert!(eig.iter().all(|e| *e >= -1e-12));
        }
    }
}
