use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::Schedule;

/// Largest EDM noise level `sigma/alpha` used when the grid starts at `gamma = 0`.
const EDM_NOISE_CAP: f64 = 100.0;

/// Time-grid families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Grid {
    #[default]
    UniformT,
    /// Uniform in `gamma`, mapped back through the inverse SNR.
    UniformGamma,
    /// Polynomial interpolation in the noise level `1/gamma` with exponent `rho`, as in EDM samplers.
    PolynomialEdm { rho: f64 },
}

/// Strictly increasing nodes from `t0` to `t1` with both endpoints pinned exactly.
pub fn build_grid(schedule: &Schedule, grid: Grid, n: usize, t0: f64, t1: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("solver.n_steps", "must be at least 1"));
    }
    if !(t0 >= 0.0 && t0 < t1 && t1 <= 1.0) {
        return Err(Error::config(
            "solver.t_start/t_end",
            format!("need 0 <= t_start < t_end <= 1, got [{t0}, {t1}]"),
        ));
    }
    let uniform = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * (i as f64 / n as f64);
    let mut nodes: Vec<f64> = match grid {
        Grid::UniformT => (0..=n).map(|i| uniform(t0, t1, i)).collect(),
        Grid::UniformGamma => {
            let (g0, g1) = (schedule.snr(t0)?.gamma, schedule.snr(t1)?.gamma);
            (0..=n)
                .map(|i| schedule.snr_inverse(uniform(g0, g1, i)))
                .collect::<Result<_>>()?
        }
        Grid::PolynomialEdm { rho } => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::config("solver.grid.rho", "must be positive"));
            }
            let (g0, g1) = (schedule.snr(t0)?.gamma, schedule.snr(t1)?.gamma);
            let s_max = if g0 > 0.0 { (1.0 / g0).min(EDM_NOISE_CAP) } else { EDM_NOISE_CAP };
            let s_min = 1.0 / g1;
            if !(s_min < s_max) {
                return Err(Error::config(
                    "solver.grid",
                    "interval too short for a polynomial noise grid",
                ));
            }
            let (a, b) = (s_max.powf(1.0 / rho), s_min.powf(1.0 / rho));
            (0..=n)
                .map(|i| {
                    let s = uniform(a, b, i).powf(rho);
                    schedule.snr_inverse(1.0 / s)
                })
                .collect::<Result<_>>()?
        }
    };
    nodes[0] = t0;
    nodes[n] = t1;
    if nodes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config(
            "solver.grid",
            format!("{n} steps on [{t0}, {t1}] do not give strictly increasing nodes"),
        ));
    }
    Ok(nodes)
}
