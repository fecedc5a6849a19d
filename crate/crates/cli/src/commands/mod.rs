pub mod guide;
pub mod sample;
pub mod train;
pub mod verify;

use flowguide::linalg::Vector;

use crate::output::num;

/// `prefix` columns followed by the coordinates of `x`.
pub(crate) fn row(prefix: &[String], x: &Vector) -> Vec<String> {
    prefix.iter().cloned().chain(x.iter().map(|v| num(*v))).collect()
}

pub(crate) fn mean(xs: &[Vector]) -> Option<Vec<f64>> {
    let first = xs.first()?;
    let mut m = Vector::zeros(first.len());
    for x in xs {
        m += x;
    }
    Some((m / xs.len() as f64).iter().copied().collect())
}

/// First two coordinates, for 2-D plots.
pub(crate) fn xy(x: &Vector) -> (f64, f64) {
    (x[0], if x.len() > 1 { x[1] } else { 0.0 })
}
