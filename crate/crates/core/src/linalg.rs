//! Dense vector and matrix aliases plus a few helpers shared across modules.

use rand::Rng;
use rand_distr::StandardNormal;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Standard-normal vector of length `dim`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vector {
    Vector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `||a - b|| / max(||b||, floor)`.
pub fn relative_error(a: &Vector, b: &Vector, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Deterministic RNG for a given seed.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
