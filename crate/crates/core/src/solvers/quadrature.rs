//! Adaptive Gauss-Kronrod (7/15) quadrature for vector-valued integrands.

// Nodes and weights are the published 30-digit values.
#![allow(clippy::excessive_precision)]

use crate::error::{Error, Result};
use crate::linalg::Vector;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for the nodes `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Kronrod estimate and `|K - G|` on one interval.
fn gk15<F>(f: &mut F, a: f64, b: f64) -> Result<(Vector, f64)>
where
    F: FnMut(f64) -> Result<Vector>,
{
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kron = &fc * WGK[7];
    let mut gauss = &fc * WG[3];
    for j in 0..7 {
        let dx = r * XGK[j];
        let fsum = f(c - dx)? + f(c + dx)?;
        kron += &fsum * WGK[j];
        if j % 2 == 1 {
            gauss += &fsum * WG[j / 2];
        }
    }
    let err = (&kron - &gauss).amax() * r;
    Ok((kron * r, err))
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol` (max-norm), bisecting the interval
/// with the largest error estimate until the total estimate falls below `tol`.
pub fn integrate<F>(mut f: F, a: f64, b: f64, tol: f64, max_intervals: usize) -> Result<(Vector, f64)>
where
    F: FnMut(f64) -> Result<Vector>,
{
    if a == b {
        let probe = f(a)?;
        return Ok((Vector::zeros(probe.len()), 0.0));
    }
    let (first, err) = gk15(&mut f, a, b)?;
    let mut parts = vec![(a, b, first, err)];
    loop {
        let total_err: f64 = parts.iter().map(|p| p.3).sum();
        if total_err <= tol {
            break;
        }
        if parts.len() >= max_intervals {
            return Err(Error::Accuracy {
                tol,
                estimate: total_err,
            });
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (left, el) = gk15(&mut f, lo, mid)?;
        let (right, er) = gk15(&mut f, mid, hi)?;
        parts.push((lo, mid, left, el));
        parts.push((mid, hi, right, er));
    }
    // Sum in interval order so the result does not depend on refinement history.
    parts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut value = Vector::zeros(parts[0].2.len());
    let mut err = 0.0;
    for p in &parts {
        value += &p.2;
        err += p.3;
    }
    Ok((value, err))
}
