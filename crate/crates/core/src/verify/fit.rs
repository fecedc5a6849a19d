use serde::Serialize;

use crate::error::{Error, Result};

/// Slopes are only asserted on fits at least this good.
pub const MIN_R2: f64 = 0.98;
pub const MIN_POINTS: usize = 5;
/// Minimum `log10(h_max / h_min)`.
pub const MIN_DECADES: f64 = 1.5;
/// Below this every error is treated as exact arithmetic.
pub const DEGENERATE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `log(error)` against `log(h)`.
pub fn fit_order(hs: &[f64], errors: &[f64]) -> Result<LineFit> {
    if hs.len() != errors.len() || hs.len() < 2 {
        return Err(Error::Input("order fit needs at least two (h, error) pairs".into()));
    }
    if hs.iter().chain(errors).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Input("order fit needs positive finite values".into()));
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("order fit needs distinct step sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LineFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum StudyStatus {
    Pass,
    Fail,
    /// The data do not support asserting a slope.
    Inconclusive(String),
    /// All errors are at rounding level: the estimator is exact for this problem.
    Degenerate,
}

impl StudyStatus {
    pub fn is_pass(&self) -> bool {
        matches!(self, StudyStatus::Pass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderFit {
    pub hs: Vec<f64>,
    pub errors: Vec<f64>,
    /// Unit of `hs`: `"gamma"` or `"t"`.
    pub h_unit: String,
    pub fit: Option<LineFit>,
    pub window: (f64, f64),
    pub status: StudyStatus,
}

impl OrderFit {
    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    pub fn r2(&self) -> Option<f64> {
        self.fit.map(|f| f.r2)
    }

    /// Applies the slope-assertion rules to measured `(h, error)` pairs.
    pub fn assess(hs: Vec<f64>, errors: Vec<f64>, h_unit: &str, window: (f64, f64)) -> Self {
        let mut out = Self {
            hs,
            errors,
            h_unit: h_unit.to_string(),
            fit: None,
            window,
            status: StudyStatus::Pass,
        };
        out.status = out.classify();
        out
    }

    /// Marks a study inconclusive for a reason found before fitting.
    pub fn inconclusive(hs: Vec<f64>, errors: Vec<f64>, h_unit: &str, window: (f64, f64), reason: String) -> Self {
        Self {
            hs,
            errors,
            h_unit: h_unit.to_string(),
            fit: None,
            window,
            status: StudyStatus::Inconclusive(reason),
        }
    }

    fn classify(&mut self) -> StudyStatus {
        let (hs, errs) = (&self.hs, &self.errors);
        if hs.windows(2).any(|w| !(w[1] < w[0])) {
            return StudyStatus::Inconclusive("step sizes are not strictly decreasing".into());
        }
        if errs.iter().any(|e| !e.is_finite()) {
            return StudyStatus::Inconclusive("non-finite error".into());
        }
        if !errs.is_empty() && errs.iter().all(|e| e.abs() < DEGENERATE_FLOOR) {
            return StudyStatus::Degenerate;
        }
        if errs.iter().any(|e| *e <= 0.0) {
            return StudyStatus::Inconclusive("zero error in a non-degenerate study".into());
        }
        if hs.len() < MIN_POINTS {
            return StudyStatus::Inconclusive(format!("{} points, need {MIN_POINTS}", hs.len()));
        }
        let decades = (hs[0] / hs[hs.len() - 1]).log10();
        if decades < MIN_DECADES {
            return StudyStatus::Inconclusive(format!("h spans {decades:.2} decades, need {MIN_DECADES}"));
        }
        let fit = match fit_order(hs, errs) {
            Ok(f) => f,
            Err(e) => return StudyStatus::Inconclusive(e.to_string()),
        };
        self.fit = Some(fit);
        if fit.r2 < MIN_R2 {
            return StudyStatus::Inconclusive(format!("r2 = {:.4} below {MIN_R2}", fit.r2));
        }
        if fit.slope >= self.window.0 && fit.slope <= self.window.1 {
            StudyStatus::Pass
        } else {
            StudyStatus::Fail
        }
    }
}

/// Geometric sequence `h_max, h_max / ratio, ...` with `n` terms.
pub fn geometric_steps(h_max: f64, ratio: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| h_max / ratio.powi(i as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_gives_exact_slope() {
        let hs = geometric_steps(0.5, 2.0, 8);
        let errs: Vec<f64> = hs.iter().map(|h| h * h).collect();
        let f = fit_order(&hs, &errs).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let study = OrderFit::assess(hs, errs, "gamma", (1.65, 2.35));
        assert_eq!(study.status, StudyStatus::Pass);
    }

    #[test]
    fn classification_rules() {
        let hs = geometric_steps(1.0, 2.0, 8);
        let cubic: Vec<f64> = hs.iter().map(|h| h.powi(3)).collect();
        assert_eq!(OrderFit::assess(hs.clone(), cubic, "t", (1.65, 2.35)).status, StudyStatus::Fail);
        let tiny = vec![1e-15; 8];
        assert_eq!(OrderFit::assess(hs.clone(), tiny, "t", (1.65, 2.35)).status, StudyStatus::Degenerate);
        let few = geometric_steps(1.0, 2.0, 4);
        let e: Vec<f64> = few.iter().map(|h| h * h).collect();
        assert!(matches!(OrderFit::assess(few, e, "t", (1.0, 3.0)).status, StudyStatus::Inconclusive(_)));
        let narrow = geometric_steps(1.0, 1.2, 8);
        let e: Vec<f64> = narrow.iter().map(|h| h * h).collect();
        assert!(matches!(OrderFit::assess(narrow, e, "t", (1.0, 3.0)).status, StudyStatus::Inconclusive(_)));
        let noisy: Vec<f64> = hs.iter().enumerate().map(|(i, h)| h * h * if i % 2 == 0 { 30.0 } else { 0.03 }).collect();
        assert!(matches!(OrderFit::assess(hs, noisy, "t", (1.0, 3.0)).status, StudyStatus::Inconclusive(_)));
    }

    proptest::proptest! {
        #[test]
        fn prop_fit_recovers_power_laws(p in 0.5f64..5.0, c in 1e-3f64..1e3) {
            let hs = geometric_steps(0.7, 1.7, 9);
            let errs: Vec<f64> = hs.iter().map(|h| c * h.powf(p)).collect();
            let f = fit_order(&hs, &errs).unwrap();
            proptest::prop_assert!((f.slope - p).abs() < 1e-9);
            proptest::prop_assert!(f.r2 > 1.0 - 1e-9);
        }
    }
}
