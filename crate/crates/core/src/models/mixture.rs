//! Closed-form posterior of a Gaussian-mixture data distribution under an affine path.
//!
//! With `X_1 ~ sum_k w_k N(mu_k, Sigma_k)` and `X_t = alpha X_1 + sigma X_0`, the marginal of `X_t`
//! is `sum_k w_k N(alpha mu_k, S_k)` with `S_k = alpha^2 Sigma_k + sigma^2 I`, and each component
//! posterior is Gaussian with
//!
//! ```text
//! m_k = mu_k + alpha Sigma_k S_k^{-1} (x - alpha mu_k)
//! C_k = Sigma_k - alpha^2 Sigma_k S_k^{-1} Sigma_k
//! ```

use std::f64::consts::PI;

use nalgebra::Cholesky;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{standard_normal, Matrix, Vector};

pub const MIN_DIM: usize = 2;
pub const MAX_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureTarget {
    weights: Vec<f64>,
    means: Vec<Vector>,
    covariances: Vec<Matrix>,
    cov_factors: Vec<Matrix>,
}

impl GaussianMixtureTarget {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covariances: Vec<Matrix>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::config(
                "model.mixture",
                format!(
                    "need matching non-empty weights/means/covariances, got {}/{}/{}",
                    k,
                    means.len(),
                    covariances.len()
                ),
            ));
        }
        let dim = means[0].len();
        if !(MIN_DIM..=MAX_DIM).contains(&dim) {
            return Err(Error::config(
                "model.mixture.means",
                format!("dimension {dim} outside supported range [{MIN_DIM}, {MAX_DIM}]"),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::config("model.mixture.weights", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "model.mixture.weights",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let mut cov_factors = Vec::with_capacity(k);
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::config(
                    "model.mixture",
                    format!("component {i} has inconsistent dimension"),
                ));
            }
            if !crate::linalg::all_finite(m) || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("model.mixture", format!("component {i} is not finite")));
            }
            if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::config(
                    "model.mixture.covariances",
                    format!("covariance {i} is not symmetric"),
                ));
            }
            // An all-zero covariance is an exact point mass; anything else must be positive definite.
            if c.iter().all(|v| *v == 0.0) {
                cov_factors.push(Matrix::zeros(dim, dim));
                continue;
            }
            let chol = Cholesky::new(c.clone()).ok_or_else(|| {
                Error::Model(format!("covariance {i} is not positive definite"))
            })?;
            cov_factors.push(chol.l());
        }
        Ok(Self {
            weights,
            means,
            covariances,
            cov_factors,
        })
    }

    /// Components with covariance `variance * I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vector>, variance: f64) -> Result<Self> {
        let dim = means.first().map_or(0, |m| m.len());
        let covs = vec![Matrix::identity(dim, dim) * variance; means.len()];
        Self::new(weights, means, covs)
    }

    /// A single point mass at `mu`.
    pub fn dirac(mu: Vector) -> Result<Self> {
        Self::isotropic(vec![1.0], vec![mu], 0.0)
    }

    /// The standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::isotropic(vec![1.0], vec![Vector::zeros(dim)], 1.0)
    }

    /// Two equal-weight isotropic modes at `+-mu`.
    pub fn symmetric_pair(mu: Vector, variance: f64) -> Result<Self> {
        let neg = -&mu;
        Self::isotropic(vec![0.5, 0.5], vec![mu, neg], variance)
    }

    /// A random well-conditioned mixture, used by the verification studies.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, n_components: usize) -> Result<Self> {
        let raw: Vec<f64> = (0..n_components).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // Renormalise the last weight so the sum is 1 to rounding.
        let head: f64 = weights[..n_components - 1].iter().sum();
        weights[n_components - 1] = 1.0 - head;
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for _ in 0..n_components {
            means.push(standard_normal(rng, dim) * 1.5);
            let b = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-0.3..0.3));
            let scale = rng.random_range(0.1..0.5);
            covs.push(&b * b.transpose() * 0.5 + Matrix::identity(dim, dim) * scale);
        }
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix] {
        &self.covariances
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = standard_normal(rng, self.dim());
        &self.means[k] + &self.cov_factors[k] * z
    }

    /// Full posterior evaluation at `(alpha, sigma, x)`.
    pub fn evaluate(&self, alpha: f64, sigma: f64, x: &Vector) -> Result<MixturePosterior> {
        let d = self.dim();
        let eye = Matrix::identity(d, d);
        let mut comps = Vec::with_capacity(self.n_components());
        let mut log_r = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let cov = &self.covariances[k];
            let s = cov * (alpha * alpha) + &eye * (sigma * sigma);
            let chol = Cholesky::new(s)
                .ok_or_else(|| Error::Model(format!("marginal covariance of component {k} is singular")))?;
            let resid = x - &self.means[k] * alpha;
            let s_inv_resid = chol.solve(&resid);
            // S^{-1} Sigma, transposed below into Sigma S^{-1}.
            let s_inv_cov = chol.solve(cov);
            let gain = s_inv_cov.transpose() * alpha;
            let mean = &self.means[k] + cov * &s_inv_resid * alpha;
            let post_cov = cov - cov * &s_inv_cov * (alpha * alpha);
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let quad = resid.dot(&s_inv_resid);
            log_r.push(self.weights[k].ln() - 0.5 * (quad + log_det + d as f64 * (2.0 * PI).ln()));
            comps.push(ComponentPosterior {
                mean,
                cov: post_cov,
                gain,
                score: -s_inv_resid,
            });
        }
        let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            // Only reachable for non-finite or astronomically large states.
            return Err(Error::Divergence {
                step: 0,
                stage: "posterior",
            });
        }
        let mut resp: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);
        let mut mean = Vector::zeros(d);
        for (r, c) in resp.iter().zip(&comps) {
            mean += &c.mean * *r;
        }
        Ok(MixturePosterior { resp, comps, mean })
    }
}

struct ComponentPosterior {
    mean: Vector,
    cov: Matrix,
    /// `alpha Sigma_k S_k^{-1}`, the Jacobian of `m_k`.
    gain: Matrix,
    /// `-S_k^{-1}(x - alpha mu_k)`, the gradient of the component log-likelihood.
    score: Vector,
}

/// Posterior of `X_1` given `alpha X_1 + sigma X_0 = x`, per component and in aggregate.
pub struct MixturePosterior {
    resp: Vec<f64>,
    comps: Vec<ComponentPosterior>,
    pub mean: Vector,
}

impl MixturePosterior {
    pub fn responsibilities(&self) -> &[f64] {
        &self.resp
    }

    /// Law of total variance.
    pub fn variance(&self) -> Matrix {
        let d = self.mean.len();
        let mut var = Matrix::zeros(d, d);
        for (r, c) in self.resp.iter().zip(&self.comps) {
            let dm = &c.mean - &self.mean;
            var += (&c.cov + &dm * dm.transpose()) * *r;
        }
        0.5 * (&var + var.transpose())
    }

    /// Exact Jacobian of the posterior mean, including the responsibility gradients.
    pub fn jacobian(&self) -> Matrix {
        let d = self.mean.len();
        let mut score_bar = Vector::zeros(d);
        for (r, c) in self.resp.iter().zip(&self.comps) {
            score_bar += &c.score * *r;
        }
        let mut jac = Matrix::zeros(d, d);
        for (r, c) in self.resp.iter().zip(&self.comps) {
            let dm = &c.mean - &self.mean;
            let dg = &c.score - &score_bar;
            jac += (&c.gain + dm * dg.transpose()) * *r;
        }
        jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_bad_weights_and_dims() {
        let m = vec![Vector::zeros(2), Vector::zeros(2)];
        assert!(GaussianMixtureTarget::isotropic(vec![0.5, 0.6], m.clone(), 1.0).is_err());
        assert!(GaussianMixtureTarget::isotropic(vec![1.0, 0.0], m, 1.0).is_err());
        assert!(GaussianMixtureTarget::standard_normal(1).is_err());
        assert!(GaussianMixtureTarget::standard_normal(65).is_err());
        let not_spd = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianMixtureTarget::new(vec![1.0], vec![Vector::zeros(2)], vec![not_spd]),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn single_standard_normal_at_midpoint() {
        let g = GaussianMixtureTarget::standard_normal(2).unwrap();
        let x = Vector::from_vec(vec![0.3, -0.7]);
        let p = g.evaluate(0.5, 0.5, &x).unwrap();
        assert_abs_diff_eq!(p.mean, x, epsilon = 1e-14);
        assert_abs_diff_eq!(p.variance(), Matrix::identity(2, 2) * 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.jacobian(), Matrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn responsibilities_survive_extreme_separation() {
        let g = GaussianMixtureTarget::symmetric_pair(Vector::from_vec(vec![2.0, 0.0]), 1e-4).unwrap();
        let x = Vector::from_vec(vec![1.998, 0.0]);
        let p = g.evaluate(0.999, 0.001, &x).unwrap();
        assert!(p.responsibilities()[0] > 1.0 - 1e-12);
        assert!(p.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampling_matches_moments() {
        let g = GaussianMixtureTarget::symmetric_pair(Vector::from_vec(vec![2.0, 0.0]), 0.25).unwrap();
        let mut rng = crate::linalg::seeded_rng(3);
        let n = 40_000;
        let mut sum = Vector::zeros(2);
        let mut sq = 0.0;
        for _ in 0..n {
            let s = g.sample(&mut rng);
            sq += s[0] * s[0];
            sum += s;
        }
        let mean = sum / n as f64;
        assert!(mean.norm() < 0.05);
        // E[x_0^2] = 4 + 0.25.
        assert!((sq / n as f64 - 4.25).abs() < 0.1);
    }
}
