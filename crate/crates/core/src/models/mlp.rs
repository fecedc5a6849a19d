//! A two-hidden-layer tanh network on `(x, t)` with hand-written forward/reverse derivatives.
//!
//! Layout: `z = [x; t]`, `h1 = tanh(W1 z + b1)`, `h2 = tanh(W2 h1 + b2)`, `out = W3 h2 + b3`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, Matrix, Vector};
use crate::models::mixture::GaussianMixtureTarget;
use crate::paths::{Schedule, ScheduleKind};

const MAGIC: &[u8; 8] = b"FLOWMLP\0";
const FORMAT_VERSION: u32 = 1;

/// What the network output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpMode {
    /// The output is the vector field `u_t(x)`.
    DirectField,
    /// The output is the posterior mean `x_{1|t}(x)`.
    TargetPrediction,
}

impl MlpMode {
    fn code(self) -> u32 {
        match self {
            MlpMode::DirectField => 0,
            MlpMode::TargetPrediction => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(MlpMode::DirectField),
            1 => Ok(MlpMode::TargetPrediction),
            c => Err(Error::Format(format!("unknown mode code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub mode: MlpMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroMlp {
    mode: MlpMode,
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    w3: Matrix,
    b3: Vector,
}

struct Activations {
    z: Vector,
    h1: Vector,
    h2: Vector,
    out: Vector,
}

/// Parameter gradients, laid out like the network.
struct Grads {
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    w3: Matrix,
    b3: Vector,
}

impl MicroMlp {
    /// Scaled-normal initialisation; the final layer starts small so the untrained field is mild.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        check_shape(spec.dim, spec.hidden1, spec.hidden2)?;
        let mut rng = seeded_rng(spec.seed);
        let mut layer = |rows: usize, cols: usize, gain: f64| {
            let scale = gain / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = layer(spec.hidden1, spec.dim + 1, 1.0);
        let w2 = layer(spec.hidden2, spec.hidden1, 1.0);
        let w3 = layer(spec.dim, spec.hidden2, 0.5);
        Ok(Self {
            mode: spec.mode,
            w1,
            b1: Vector::zeros(spec.hidden1),
            w2,
            b2: Vector::zeros(spec.hidden2),
            w3,
            b3: Vector::zeros(spec.dim),
        })
    }

    pub fn mode(&self) -> MlpMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.w3.nrows()
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.w1.nrows(), self.w2.nrows())
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn input(&self, t: f64, x: &Vector) -> Vector {
        let d = self.dim();
        Vector::from_fn(d + 1, |i, _| if i < d { x[i] } else { t })
    }

    fn activations(&self, t: f64, x: &Vector) -> Activations {
        let z = self.input(t, x);
        let h1 = (&self.w1 * &z + &self.b1).map(f64::tanh);
        let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
        let out = &self.w3 * &h2 + &self.b3;
        Activations { z, h1, h2, out }
    }

    /// Raw network output.
    pub fn forward(&self, t: f64, x: &Vector) -> Vector {
        self.activations(t, x).out
    }

    /// Forward-mode derivative of the output in direction `v` (in `x` only).
    pub fn jvp(&self, t: f64, x: &Vector, v: &Vector) -> Vector {
        let act = self.activations(t, x);
        let dz = Vector::from_fn(self.dim() + 1, |i, _| if i < self.dim() { v[i] } else { 0.0 });
        let dh1 = (&self.w1 * dz).component_mul(&act.h1.map(|h| 1.0 - h * h));
        let dh2 = (&self.w2 * dh1).component_mul(&act.h2.map(|h| 1.0 - h * h));
        &self.w3 * dh2
    }

    /// Reverse-mode derivative `(d out / d x)^T w`.
    pub fn vjp(&self, t: f64, x: &Vector, w: &Vector) -> Vector {
        let act = self.activations(t, x);
        let (_, d1) = self.backward_hidden(&act, w);
        self.w1.tr_mul(&d1).rows(0, self.dim()).into_owned()
    }

    /// Jacobian of the output in `x`.
    pub fn jacobian(&self, t: f64, x: &Vector) -> Matrix {
        let act = self.activations(t, x);
        let d = self.dim();
        let s1 = act.h1.map(|h| 1.0 - h * h);
        let s2 = act.h2.map(|h| 1.0 - h * h);
        let w1x = self.w1.columns(0, d);
        let a1 = Matrix::from_diagonal(&s1) * w1x;
        let a2 = Matrix::from_diagonal(&s2) * (&self.w2 * a1);
        &self.w3 * a2
    }

    /// Pre-activation sensitivities of both hidden layers for output cotangent `w`.
    fn backward_hidden(&self, act: &Activations, w: &Vector) -> (Vector, Vector) {
        let d2 = self.w3.tr_mul(w).component_mul(&act.h2.map(|h| 1.0 - h * h));
        let d1 = self.w2.tr_mul(&d2).component_mul(&act.h1.map(|h| 1.0 - h * h));
        (d2, d1)
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            w1: Matrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: Vector::zeros(self.b1.len()),
            w2: Matrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: Vector::zeros(self.b2.len()),
            w3: Matrix::zeros(self.w3.nrows(), self.w3.ncols()),
            b3: Vector::zeros(self.b3.len()),
        }
    }

    fn accumulate_param_grads(&self, act: &Activations, w: &Vector, g: &mut Grads) {
        let (d2, d1) = self.backward_hidden(act, w);
        g.w3.ger(1.0, w, &act.h2, 1.0);
        g.b3 += w;
        g.w2.ger(1.0, &d2, &act.h1, 1.0);
        g.b2 += &d2;
        g.w1.ger(1.0, &d1, &act.z, 1.0);
        g.b1 += &d1;
    }

    fn apply(&mut self, g: &Grads, lr: f64) {
        self.w1 -= &g.w1 * lr;
        self.b1.axpy(-lr, &g.b1, 1.0);
        self.w2 -= &g.w2 * lr;
        self.b2.axpy(-lr, &g.b2, 1.0);
        self.w3 -= &g.w3 * lr;
        self.b3.axpy(-lr, &g.b3, 1.0);
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn params_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Serialises to the versioned little-endian weights format (matrices row-major).
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h1, h2) = self.widths();
        let mut out = Vec::with_capacity(32 + 8 * self.n_params());
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, self.dim() as u32, h1 as u32, h2 as u32, self.mode.code()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut push_matrix = |m: &Matrix| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        };
        push_matrix(&self.w1);
        push_matrix(&Matrix::from_column_slice(self.b1.len(), 1, self.b1.as_slice()));
        push_matrix(&self.w2);
        push_matrix(&Matrix::from_column_slice(self.b2.len(), 1, self.b2.as_slice()));
        push_matrix(&self.w3);
        push_matrix(&Matrix::from_column_slice(self.b3.len(), 1, self.b3.as_slice()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing magic header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (d, h1, h2) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let mode = MlpMode::from_code(word(4))?;
        check_shape(d, h1, h2).map_err(|e| Error::Format(e.to_string()))?;
        let n = h1 * (d + 1) + h1 + h2 * h1 + h2 + d * h2 + d;
        let body = &bytes[28..];
        if body.len() != 8 * n {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                8 * n,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |rows: usize, cols: usize| {
            Matrix::from_row_iterator(rows, cols, values.by_ref().take(rows * cols))
        };
        let w1 = take(h1, d + 1);
        let b1 = take(h1, 1).column(0).into_owned();
        let w2 = take(h2, h1);
        let b2 = take(h2, 1).column(0).into_owned();
        let w3 = take(d, h2);
        let b3 = take(d, 1).column(0).into_owned();
        let net = Self {
            mode,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        };
        if !net.params_finite() {
            return Err(Error::Format("non-finite weight".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn check_shape(dim: usize, h1: usize, h2: usize) -> Result<()> {
    if !(2..=64).contains(&dim) {
        return Err(Error::config("mlp.dim", format!("dimension {dim} outside [2, 64]")));
    }
    if h1 == 0 || h2 == 0 {
        return Err(Error::config("mlp.width", "hidden widths must be at least 1"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub heldout_size: usize,
    /// Held-out loss the trained model must beat; `None` uses the zero-predictor loss.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 0.05,
            hidden1: 64,
            hidden2: 64,
            heldout_size: 4096,
            threshold: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub heldout_loss: f64,
    /// Held-out loss of the predictor that always outputs zero.
    pub baseline_loss: f64,
    pub threshold: f64,
    /// Mean training loss over consecutive windows of steps.
    pub loss_curve: Vec<(usize, f64)>,
}

struct FmBatch {
    t: Vec<f64>,
    xt: Vec<Vector>,
    target: Vec<Vector>,
}

fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    target: &GaussianMixtureTarget,
    t_end: f64,
    n: usize,
) -> FmBatch {
    let mut b = FmBatch {
        t: Vec::with_capacity(n),
        xt: Vec::with_capacity(n),
        target: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x1 = target.sample(rng);
        let x0 = crate::linalg::standard_normal(rng, target.dim());
        let t: f64 = rng.random_range(0.0..=t_end);
        b.xt.push(&x1 * t + &x0 * (1.0 - t));
        b.target.push(x1 - x0);
        b.t.push(t);
    }
    b
}

fn batch_loss(net: &MicroMlp, b: &FmBatch) -> f64 {
    let total: f64 = (0..b.t.len())
        .map(|i| (net.forward(b.t[i], &b.xt[i]) - &b.target[i]).norm_squared())
        .sum();
    total / b.t.len() as f64
}

/// Conditional flow-matching regression of the network field onto `x_1 - x_0` for the
/// straight-line path. Plain SGD with a cosine-decayed step.
pub fn train_micro_mlp(
    target: &GaussianMixtureTarget,
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<(MicroMlp, TrainReport)> {
    if !matches!(schedule.kind(), ScheduleKind::CondOt) {
        return Err(Error::config(
            "schedule",
            "flow-matching targets are only defined for the cond_ot schedule",
        ));
    }
    if cfg.batch_size == 0 || cfg.heldout_size == 0 {
        return Err(Error::config("train", "batch_size and heldout_size must be positive"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::config("train.learning_rate", "must be positive"));
    }
    let spec = MlpSpec {
        dim: target.dim(),
        hidden1: cfg.hidden1,
        hidden2: cfg.hidden2,
        mode: MlpMode::DirectField,
        seed: cfg.seed,
    };
    let mut net = MicroMlp::init(&spec)?;
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let heldout = sample_batch(&mut seeded_rng(cfg.seed.wrapping_add(2)), target, schedule.t_end(), cfg.heldout_size);

    let window = (cfg.steps / 100).max(1);
    let mut loss_curve = Vec::new();
    let mut window_sum = 0.0;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let lr = cfg.learning_rate * 0.5 * (1.0 + (PI * step as f64 / cfg.steps as f64).cos());
        let batch = sample_batch(&mut rng, target, schedule.t_end(), cfg.batch_size);
        let mut grads = net.zero_grads();
        let mut loss = 0.0;
        let scale = 2.0 / cfg.batch_size as f64;
        for i in 0..cfg.batch_size {
            let act = net.activations(batch.t[i], &batch.xt[i]);
            let resid = &act.out - &batch.target[i];
            loss += resid.norm_squared();
            net.accumulate_param_grads(&act, &(resid * scale), &mut grads);
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Training { step, last_loss });
        }
        net.apply(&grads, lr);
        if !net.params_finite() {
            return Err(Error::Training { step, last_loss: loss });
        }
        last_loss = loss;
        window_sum += loss;
        if (step + 1) % window == 0 {
            loss_curve.push((step + 1, window_sum / window as f64));
            window_sum = 0.0;
        }
    }

    let heldout_loss = batch_loss(&net, &heldout);
    let baseline_loss = heldout.target.iter().map(|v| v.norm_squared()).sum::<f64>() / cfg.heldout_size as f64;
    let threshold = cfg.threshold.unwrap_or(baseline_loss);
    if !(heldout_loss < threshold) {
        return Err(Error::TrainingThreshold {
            heldout: heldout_loss,
            threshold,
        });
    }
    Ok((
        net,
        TrainReport {
            heldout_loss,
            baseline_loss,
            threshold,
            loss_curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: MlpMode) -> MicroMlp {
        MicroMlp::init(&MlpSpec {
            dim: 3,
            hidden1: 7,
            hidden2: 5,
            mode,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn width_zero_is_a_config_error() {
        let spec = MlpSpec {
            dim: 2,
            hidden1: 0,
            hidden2: 4,
            mode: MlpMode::DirectField,
            seed: 0,
        };
        assert!(matches!(MicroMlp::init(&spec), Err(Error::Config { .. })));
    }

    #[test]
    fn jvp_and_vjp_match_central_differences() {
        let net = small(MlpMode::DirectField);
        let mut rng = seeded_rng(5);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.0..0.99);
            let x = crate::linalg::standard_normal(&mut rng, 3);
            let v = crate::linalg::standard_normal(&mut rng, 3);
            let w = crate::linalg::standard_normal(&mut rng, 3);
            let h = 1e-5;
            let fd = (net.forward(t, &(&x + &v * h)) - net.forward(t, &(&x - &v * h))) / (2.0 * h);
            let jvp = net.jvp(t, &x, &v);
            worst = worst.max((&jvp - &fd).norm() / fd.norm().max(1e-8));
            // Directional derivative of <w, out> along v is <vjp(w), v>.
            let fd_dir = w.dot(&fd);
            let vjp_dir = net.vjp(t, &x, &w).dot(&v);
            worst = worst.max((fd_dir - vjp_dir).abs() / fd_dir.abs().max(1e-8));
            let jac = net.jacobian(t, &x);
            assert!((jac * &v - &jvp).norm() <= 1e-12 * jvp.norm().max(1.0));
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = small(MlpMode::DirectField);
        let t = 0.3;
        let x = Vector::from_vec(vec![0.4, -1.0, 0.2]);
        let w = Vector::from_vec(vec![1.0, -0.5, 2.0]);
        let mut g = net.zero_grads();
        net.accumulate_param_grads(&net.activations(t, &x), &w, &mut g);
        let f = |n: &MicroMlp| w.dot(&n.forward(t, &x));
        let h = 1e-6;
        for (r, c) in [(0, 0), (3, 2), (6, 3)] {
            let mut p = net.clone();
            p.w1[(r, c)] += h;
            let mut m = net.clone();
            m.w1[(r, c)] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.w1[(r, c)]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
        let mut p = net.clone();
        p.b2[1] += h;
        let mut m = net.clone();
        m.b2[1] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        assert!((fd - g.b2[1]).abs() <= 1e-6 * fd.abs().max(1e-3));
    }

    #[test]
    fn weights_round_trip_and_reject_corruption() {
        let net = small(MlpMode::TargetPrediction);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(MicroMlp::from_bytes(&bytes).unwrap(), net);
        // First weight is W1[0,0], stored right after the 28-byte header.
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), net.w1[(0, 0)]);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), net.w1[(0, 1)]);
        assert!(MicroMlp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(MicroMlp::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(MicroMlp::from_bytes(&bad).is_err());
    }

    #[test]
    fn training_rejects_non_straight_paths_and_bad_rates() {
        let target = GaussianMixtureTarget::standard_normal(2).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            ..Default::default()
        };
        assert!(train_micro_mlp(&target, &Schedule::variance_preserving(), &cfg).is_err());
        let cfg = TrainConfig {
            steps: 10,
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(train_micro_mlp(&target, &Schedule::cond_ot(), &cfg).is_err());
    }

    #[test]
    fn divergent_training_reports_the_step() {
        let target = GaussianMixtureTarget::symmetric_pair(Vector::from_vec(vec![2.0, 0.0]), 0.04).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 1e6,
            hidden1: 8,
            hidden2: 8,
            ..Default::default()
        };
        let err = train_micro_mlp(&target, &Schedule::cond_ot(), &cfg).unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }
}
