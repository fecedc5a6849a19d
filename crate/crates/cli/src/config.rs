//! Experiment configuration: a strict TOML schema plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowguide::grads::{AdjointConfig, GreedyEstimator, LossSpec, Replay};
use flowguide::linalg::{seeded_rng, Matrix, Vector};
use flowguide::models::{GaussianMixtureTarget, MicroMlp, PosteriorModel, TrainConfig};
use flowguide::paths::{Schedule, ScheduleKind};
use flowguide::solvers::{Grid, QuadratureConfig, Scheme, SolverConfig};
use flowguide::tasks::{make_inverse_problem, EtaSchedule, GuidanceEngine, InverseKind, InverseProblem, OptimizeConfig};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output subdirectory name.
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output root; `FLOWGUIDE_OUTDIR` takes precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    pub model: ModelBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub loss: Option<LossBlock>,
    #[serde(default)]
    pub sample: Option<SampleBlock>,
    #[serde(default)]
    pub guide: Option<GuideBlock>,
    #[serde(default)]
    pub verify: Option<VerifyBlock>,
    #[serde(default)]
    pub train: Option<TrainBlock>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    #[default]
    CondOt,
    VariancePreserving,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(default)]
    pub kind: ScheduleName,
    #[serde(default = "default_t_eps")]
    pub t_eps: f64,
}

fn default_t_eps() -> f64 {
    1e-3
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            kind: ScheduleName::CondOt,
            t_eps: default_t_eps(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelBlock {
    /// Explicit components; give either `variances` (isotropic) or full `covariances`.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        #[serde(default)]
        variances: Option<Vec<f64>>,
        #[serde(default)]
        covariances: Option<Vec<Vec<Vec<f64>>>>,
    },
    SymmetricPair { mu: Vec<f64>, variance: f64 },
    Dirac { mu: Vec<f64> },
    StandardNormal { dim: usize },
    /// A random mixture drawn from `seed`.
    Random { dim: usize, components: usize, seed: u64 },
    /// A trained network; relative paths resolve against the config file.
    Mlp { weights: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default)]
    pub t_end: Option<f64>,
}

fn default_scheme() -> Scheme {
    Scheme::Euler
}

fn default_steps() -> usize {
    64
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            n_steps: default_steps(),
            grid: Grid::UniformT,
            t_start: 0.0,
            t_end: None,
        }
    }
}

impl SolverBlock {
    pub fn to_config(&self) -> Result<SolverConfig, CliError> {
        if self.n_steps == 0 {
            return Err(CliError::config("solver.n_steps", "must be at least 1"));
        }
        let mut cfg = SolverConfig::new(self.scheme, self.n_steps).with_grid(self.grid).from_time(self.t_start);
        cfg.t_end = self.t_end;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossBlock {
    Quadratic {
        target: Vec<f64>,
    },
    /// A synthetic inverse problem built from `truth`.
    InverseProblem {
        problem: InverseKind,
        truth: Vec<f64>,
        beta: f64,
        #[serde(default)]
        seed: u64,
    },
}

pub enum BuiltLoss {
    Plain(LossSpec),
    Inverse(InverseProblem),
}

impl BuiltLoss {
    pub fn loss_spec(&self) -> LossSpec {
        match self {
            BuiltLoss::Plain(l) => l.clone(),
            BuiltLoss::Inverse(p) => p.loss(),
        }
    }

    /// The point metrics measure distance to: the quadratic target or the problem's truth.
    pub fn reference(&self) -> Option<Vector> {
        match self {
            BuiltLoss::Plain(LossSpec::Quadratic { target }) => Some(target.clone()),
            BuiltLoss::Plain(_) => None,
            BuiltLoss::Inverse(p) => p.truth.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBlock {
    #[serde(default = "one")]
    pub n_samples: usize,
    /// Integrate in the `gamma` variable instead of `t`.
    #[serde(default)]
    pub reparam_gamma: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GuideMode {
    GuidedSample,
    OptimizeX0,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideBlock {
    pub mode: GuideMode,
    #[serde(default = "default_engine")]
    pub engine: GuidanceEngine,
    #[serde(default = "default_eta")]
    pub eta_schedule: EtaSchedule,
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default = "one")]
    pub n_samples: usize,
    /// Radius of the hit-rate ball around the loss reference point.
    #[serde(default = "default_radius")]
    pub hit_radius: f64,
    #[serde(default)]
    pub optimize: OptimizeConfig,
}

fn default_engine() -> GuidanceEngine {
    GuidanceEngine::greedy(GreedyEstimator::Euler1)
}

fn default_eta() -> EtaSchedule {
    EtaSchedule::Constant { eta: 1.0 }
}

fn default_radius() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StudyName {
    IdentitySuite,
    DtoExactness,
    OrderGradient,
    GreedyVsIdeal,
    GreedyConvergence,
    ControlAdjoint,
    EngineCoherence,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    pub studies: Vec<StudyName>,
    /// State (or initial noise) used by the studies; defaults to a seeded draw.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub identity: IdentityBlock,
    #[serde(default)]
    pub order: OrderBlock,
    #[serde(default)]
    pub greedy_vs_ideal: GreedyIdealBlock,
    #[serde(default)]
    pub convergence: ConvergenceBlock,
    #[serde(default)]
    pub control: ControlBlock,
    #[serde(default)]
    pub coherence: CoherenceBlock,
    #[serde(default)]
    pub exactness: ExactnessBlock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityBlock {
    pub variance_probes: usize,
    pub reconstruction_probes: usize,
    pub coefficient_probes: usize,
    pub variance_corruption: f64,
    pub quadrature: QuadratureConfig,
}

impl Default for IdentityBlock {
    fn default() -> Self {
        Self {
            variance_probes: 100,
            reconstruction_probes: 3,
            coefficient_probes: 1000,
            variance_corruption: 1.0,
            quadrature: QuadratureConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrderBlock {
    pub schemes: Vec<Scheme>,
    pub s: f64,
    pub h_max: f64,
    pub ratio: f64,
    pub n_points: usize,
    pub reference_steps: usize,
}

impl Default for OrderBlock {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Euler, Scheme::Midpoint],
            s: 0.5,
            h_max: 0.0625,
            ratio: 2.0,
            n_points: 8,
            reference_steps: 1024,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreedyIdealBlock {
    pub h_max: f64,
    pub ratio: f64,
    pub n_points: usize,
    pub dense_steps: usize,
}

impl Default for GreedyIdealBlock {
    fn default() -> Self {
        Self {
            h_max: 64.0,
            ratio: 2.0,
            n_points: 8,
            dense_steps: 512,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceBlock {
    pub times: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub dense_steps: usize,
    pub slack: f64,
}

impl Default for ConvergenceBlock {
    fn default() -> Self {
        Self {
            times: vec![0.5, 0.7, 0.8, 0.9, 0.95],
            tol: 1e-8,
            max_iters: 20_000,
            dense_steps: 1024,
            slack: 1.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlBlock {
    pub t_end: f64,
    pub adjoint_steps: usize,
    pub euler_steps: Vec<usize>,
    pub reference_steps: usize,
}

impl Default for ControlBlock {
    fn default() -> Self {
        Self {
            t_end: 0.9,
            adjoint_steps: 256,
            euler_steps: vec![16, 32, 64, 128, 256, 512, 1024],
            reference_steps: 4096,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceBlock {
    pub n_steps: usize,
    pub scheme: Scheme,
    pub grid: Grid,
    pub adjoint_scheme: Scheme,
    pub replay: Replay,
    pub t: f64,
}

impl Default for CoherenceBlock {
    fn default() -> Self {
        Self {
            n_steps: 256,
            scheme: Scheme::Rk4,
            grid: Grid::UniformT,
            adjoint_scheme: Scheme::Rk4,
            replay: Replay::StoredStates,
            t: 0.0,
        }
    }
}

impl CoherenceBlock {
    pub fn adjoint(&self) -> AdjointConfig {
        AdjointConfig {
            scheme: self.adjoint_scheme,
            replay: self.replay,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactnessBlock {
    pub schemes: Vec<Scheme>,
    pub probes: usize,
    pub n_steps: usize,
    pub tolerance: f64,
}

impl Default for ExactnessBlock {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Euler, Scheme::Midpoint, Scheme::Rk4],
            probes: 5,
            n_steps: 32,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_width")]
    pub hidden1: usize,
    #[serde(default = "default_width")]
    pub hidden2: usize,
    #[serde(default = "default_heldout")]
    pub heldout_size: usize,
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_train_steps() -> usize {
    20_000
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_width() -> usize {
    64
}
fn default_heldout() -> usize {
    4096
}

impl TrainBlock {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            heldout_size: self.heldout_size,
            threshold: self.threshold,
            seed,
        }
    }
}

/// Reads, overrides and validates a config file.
pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    if let Some(seed) = seed {
        value.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
        let field = e.path().to_string();
        CliError::Config(format!("invalid config field `{field}`: {}", e.inner()))
    })?;
    if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) || cfg.name == "." || cfg.name == ".." {
        return Err(CliError::config("name", "must be a plain, non-empty directory name"));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, or taken as a string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{item}`")))?;
    let key = key.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set has an empty key segment in `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set `{key}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn vector(v: &[f64]) -> Vector {
    Vector::from_column_slice(v)
}

impl ExperimentConfig {
    pub fn schedule(&self) -> Result<Schedule, CliError> {
        let kind = match self.schedule.kind {
            ScheduleName::CondOt => ScheduleKind::CondOt,
            ScheduleName::VariancePreserving => ScheduleKind::VariancePreserving,
        };
        Ok(Schedule::new(kind, self.schedule.t_eps)?)
    }

    pub fn mixture(&self) -> Result<GaussianMixtureTarget, CliError> {
        let target = match &self.model {
            ModelBlock::Mixture {
                weights,
                means,
                variances,
                covariances,
            } => {
                let means: Vec<Vector> = means.iter().map(|m| vector(m)).collect();
                match (variances, covariances) {
                    (Some(vars), None) => {
                        if vars.len() != means.len() {
                            return Err(CliError::config("model.variances", "need one variance per component"));
                        }
                        let covs = means
                            .iter()
                            .zip(vars)
                            .map(|(m, v)| Matrix::identity(m.len(), m.len()) * *v)
                            .collect();
                        GaussianMixtureTarget::new(weights.clone(), means, covs)?
                    }
                    (None, Some(covs)) => {
                        let mut mats = Vec::with_capacity(covs.len());
                        for (i, rows) in covs.iter().enumerate() {
                            let n = rows.len();
                            if rows.iter().any(|r| r.len() != n) {
                                return Err(CliError::config("model.covariances", format!("covariance {i} is not square")));
                            }
                            mats.push(Matrix::from_fn(n, n, |r, c| rows[r][c]));
                        }
                        GaussianMixtureTarget::new(weights.clone(), means, mats)?
                    }
                    _ => {
                        return Err(CliError::config(
                            "model",
                            "give exactly one of `variances` or `covariances`",
                        ))
                    }
                }
            }
            ModelBlock::SymmetricPair { mu, variance } => GaussianMixtureTarget::symmetric_pair(vector(mu), *variance)?,
            ModelBlock::Dirac { mu } => GaussianMixtureTarget::dirac(vector(mu))?,
            ModelBlock::StandardNormal { dim } => GaussianMixtureTarget::standard_normal(*dim)?,
            ModelBlock::Random { dim, components, seed } => {
                if *components == 0 {
                    return Err(CliError::config("model.components", "must be at least 1"));
                }
                GaussianMixtureTarget::random(&mut seeded_rng(*seed), *dim, *components)?
            }
            ModelBlock::Mlp { .. } => return Err(CliError::config("model", "this command needs a mixture model")),
        };
        Ok(target)
    }

    pub fn model(&self, base: &Path) -> Result<PosteriorModel, CliError> {
        let schedule = self.schedule()?;
        match &self.model {
            ModelBlock::Mlp { weights } => {
                let path = if weights.is_absolute() { weights.clone() } else { base.join(weights) };
                Ok(PosteriorModel::mlp(schedule, MicroMlp::load(&path)?))
            }
            _ => Ok(PosteriorModel::mixture(schedule, self.mixture()?)),
        }
    }

    pub fn loss(&self, dim: usize) -> Result<BuiltLoss, CliError> {
        let block = self
            .loss
            .as_ref()
            .ok_or_else(|| CliError::config("loss", "this command needs a [loss] block"))?;
        let built = match block {
            LossBlock::Quadratic { target } => BuiltLoss::Plain(LossSpec::quadratic(vector(target))),
            LossBlock::InverseProblem {
                problem,
                truth,
                beta,
                seed,
            } => BuiltLoss::Inverse(make_inverse_problem(problem, &vector(truth), *beta, *seed)?),
        };
        built.loss_spec().validate(dim)?;
        Ok(built)
    }

    pub fn study_state(&self, dim: usize) -> Result<Vector, CliError> {
        match self.verify.as_ref().and_then(|v| v.x.as_ref()) {
            Some(x) if x.len() == dim => Ok(vector(x)),
            Some(_) => Err(CliError::config("verify.x", format!("must have {dim} entries"))),
            None => Ok(flowguide::tasks::noise_for_seed(dim, self.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_nest() {
        let mut t: toml::Table = toml::from_str("name = \"a\"\n[solver]\nn_steps = 4\n").unwrap();
        apply_override(&mut t, "solver.n_steps=16").unwrap();
        apply_override(&mut t, "solver.scheme=rk4").unwrap();
        apply_override(&mut t, "guide.eta_schedule.eta = 0.5").unwrap();
        assert_eq!(t["solver"]["n_steps"].as_integer(), Some(16));
        assert_eq!(t["solver"]["scheme"].as_str(), Some("rk4"));
        assert_eq!(t["guide"]["eta_schedule"]["eta"].as_float(), Some(0.5));
        assert!(apply_override(&mut t, "name.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }
}
