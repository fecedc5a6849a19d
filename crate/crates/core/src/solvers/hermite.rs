use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Piecewise cubic Hermite interpolant through `(t_i, y_i, y'_i)`.
#[derive(Clone, Debug)]
pub struct HermiteCurve {
    times: Vec<f64>,
    values: Vec<Vector>,
    derivs: Vec<Vector>,
}

impl HermiteCurve {
    pub fn new(times: Vec<f64>, values: Vec<Vector>, derivs: Vec<Vector>) -> Result<Self> {
        if times.len() < 2 || values.len() != times.len() || derivs.len() != times.len() {
            return Err(Error::Input("hermite curve needs matching samples (at least two)".into()));
        }
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        let decreasing = times.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::Input("hermite nodes must be strictly monotone".into()));
        }
        let (mut times, mut values, mut derivs) = (times, values, derivs);
        if decreasing {
            times.reverse();
            values.reverse();
            derivs.reverse();
        }
        Ok(Self { times, values, derivs })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn segment(&self, t: f64) -> Result<usize> {
        let slack = 1e-12 * (self.end() - self.start());
        if !(t >= self.start() - slack && t <= self.end() + slack) {
            return Err(Error::Domain {
                t,
                lo: self.start(),
                hi: self.end(),
            });
        }
        let i = self.times.partition_point(|&x| x <= t);
        Ok(i.clamp(1, self.times.len() - 1) - 1)
    }

    pub fn eval(&self, t: f64) -> Result<Vector> {
        let i = self.segment(t)?;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        // Exact node hits return the stored sample bit-for-bit.
        if s == 0.0 {
            return Ok(self.values[i].clone());
        }
        if s == 1.0 {
            return Ok(self.values[i + 1].clone());
        }
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok(&self.values[i] * h00
            + &self.derivs[i] * (h10 * h)
            + &self.values[i + 1] * h01
            + &self.derivs[i + 1] * (h11 * h))
    }

    /// Exact integral of the interpolant over one segment.
    fn segment_integral(&self, i: usize) -> Vector {
        let h = self.times[i + 1] - self.times[i];
        (&self.values[i] + &self.values[i + 1]) * (0.5 * h)
            + (&self.derivs[i] - &self.derivs[i + 1]) * (h * h / 12.0)
    }

    /// `int_{t_i}^{end}` of the interpolant for every node `t_i`.
    pub fn tail_integrals(&self) -> Vec<Vector> {
        let n = self.times.len();
        let mut out = vec![Vector::zeros(self.values[0].len()); n];
        for i in (0..n - 1).rev() {
            out[i] = &out[i + 1] + self.segment_integral(i);
        }
        out
    }
}
