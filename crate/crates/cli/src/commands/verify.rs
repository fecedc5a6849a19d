use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use flowguide::grads::{control_adjoint, AdjointConfig, LossSpec};
use flowguide::linalg::{seeded_rng, standard_normal, Vector};
use flowguide::models::PosteriorModel;
use flowguide::solvers::{Scheme, SolverConfig};
use flowguide::verify::{
    control_adjoint_study, dto_exactness, engine_coherence, greedy_convergence_study, greedy_vs_ideal_study,
    identity_suite, order_study_gradient, Check, CoherenceConfig, ControlStudyConfig, ConvergenceConfig,
    GreedyIdealConfig, IdentityConfig, OrderFit, OrderStudyConfig, StudyStatus,
};
use flowguide::Error;

use crate::config::{ExperimentConfig, StudyName, VerifyBlock};
use crate::error::CliError;
use crate::output::{num, OutputDir};
use crate::svg::{loglog, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Outcome {
    Pass,
    /// Exact to rounding; there is no slope to assert.
    Degenerate,
    Inconclusive,
    Fail,
}

#[derive(Serialize)]
struct StudyReport {
    study: StudyName,
    outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    detail: Value,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    passed: bool,
    studies: Vec<StudyReport>,
}

struct Produced {
    report: StudyReport,
    files: Vec<(String, Vec<u8>)>,
}

fn outcome_of(status: &StudyStatus) -> (Outcome, Option<String>) {
    match status {
        StudyStatus::Pass => (Outcome::Pass, None),
        StudyStatus::Fail => (Outcome::Fail, None),
        StudyStatus::Degenerate => (Outcome::Degenerate, None),
        StudyStatus::Inconclusive(r) => (Outcome::Inconclusive, Some(r.clone())),
    }
}

fn checks_outcome(checks: &[Check]) -> Outcome {
    if checks.iter().all(|c| c.passed) {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")))
}

fn checks_csv(checks: &[Check]) -> Result<Vec<u8>, CliError> {
    let rows: Vec<_> = checks
        .iter()
        .map(|c| vec![c.name.clone(), num(c.residual), num(c.threshold), c.passed.to_string()])
        .collect();
    csv_bytes(&["check", "residual", "threshold", "passed"], &rows)
}

fn fit_detail(fit: &OrderFit) -> Value {
    json!({
        "h_unit": fit.h_unit,
        "slope": fit.slope(),
        "r2": fit.r2(),
        "window": [fit.window.0, fit.window.1],
    })
}

fn require_loss(cfg: &ExperimentConfig, dim: usize, study: &str) -> Result<LossSpec, CliError> {
    cfg.loss(dim)
        .map(|l| l.loss_spec())
        .map_err(|e| e.with_context(&format!("study `{study}`")))
}

pub fn run(cfg: &ExperimentConfig, base: &Path, out: &OutputDir) -> Result<(), CliError> {
    let block = cfg
        .verify
        .as_ref()
        .ok_or_else(|| CliError::config("verify", "the verify command needs a [verify] block"))?;
    if block.studies.is_empty() {
        return Err(CliError::config("verify.studies", "no studies listed"));
    }
    let model = cfg.model(base)?;
    let x = cfg.study_state(model.dim())?;
    let produced: Vec<Produced> = block
        .studies
        .par_iter()
        .map(|study| run_study(*study, cfg, block, &model, &x))
        .collect::<Result<_, CliError>>()?;

    let mut reports = Vec::with_capacity(produced.len());
    for p in produced {
        for (file, bytes) in &p.files {
            out.write_bytes(file, bytes)?;
        }
        reports.push(p.report);
    }
    let worst = reports.iter().map(|r| r.outcome).max().unwrap_or(Outcome::Pass);
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| matches!(r.outcome, Outcome::Fail | Outcome::Inconclusive))
        .map(|r| format!("{:?}", r.study))
        .collect();
    out.write_json(
        "summary.json",
        &Summary {
            command: "verify",
            config: cfg,
            passed: worst <= Outcome::Degenerate,
            studies: reports,
        },
    )?;
    match worst {
        Outcome::Fail => Err(CliError::Failed(format!("studies did not pass: {}", failing.join(", ")))),
        Outcome::Inconclusive => Err(CliError::Inconclusive(format!(
            "studies could not assert their claims: {}",
            failing.join(", ")
        ))),
        _ => Ok(()),
    }
}

fn run_study(
    study: StudyName,
    cfg: &ExperimentConfig,
    block: &VerifyBlock,
    model: &PosteriorModel,
    x: &Vector,
) -> Result<Produced, CliError> {
    let dim = model.dim();
    let sch = model.schedule();
    let produced = match study {
        StudyName::IdentitySuite => {
            let b = &block.identity;
            let report = identity_suite(
                model,
                &IdentityConfig {
                    seed: cfg.seed,
                    variance_probes: b.variance_probes,
                    reconstruction_probes: b.reconstruction_probes,
                    coefficient_probes: b.coefficient_probes,
                    variance_corruption: b.variance_corruption,
                    quadrature: b.quadrature,
                },
            )?;
            Produced {
                report: StudyReport {
                    study,
                    outcome: checks_outcome(&report.checks),
                    reason: None,
                    detail: json!({ "checks": report.checks }),
                    files: vec!["identity_suite.csv".into()],
                },
                files: vec![("identity_suite.csv".into(), checks_csv(&report.checks)?)],
            }
        }
        StudyName::DtoExactness => {
            let b = &block.exactness;
            let loss = require_loss(cfg, dim, "dto_exactness")?;
            let mut rng = seeded_rng(cfg.seed);
            let probes: Vec<Vector> = (0..b.probes).map(|_| standard_normal(&mut rng, dim)).collect();
            let mut checks = Vec::new();
            for scheme in &b.schemes {
                let worst = dto_exactness(model, &loss, &SolverConfig::new(*scheme, b.n_steps), &probes)?;
                checks.push(Check::new(scheme.name(), worst, b.tolerance));
            }
            Produced {
                report: StudyReport {
                    study,
                    outcome: checks_outcome(&checks),
                    reason: None,
                    detail: json!({ "checks": checks, "probes": b.probes, "n_steps": b.n_steps }),
                    files: vec!["dto_exactness.csv".into()],
                },
                files: vec![("dto_exactness.csv".into(), checks_csv(&checks)?)],
            }
        }
        StudyName::OrderGradient => {
            let b = &block.order;
            let loss = require_loss(cfg, dim, "order_gradient")?;
            let g_s = sch.gamma(b.s);
            let mut rows = Vec::new();
            let mut series = Vec::new();
            let mut details = Vec::new();
            let mut outcome = Outcome::Pass;
            let mut reasons = Vec::new();
            for scheme in &b.schemes {
                let fit = order_study_gradient(
                    model,
                    &loss,
                    *scheme,
                    &OrderStudyConfig {
                        s: b.s,
                        x: x.clone(),
                        h_max: b.h_max,
                        ratio: b.ratio,
                        n_points: b.n_points,
                        reference_steps: b.reference_steps,
                    },
                )?;
                let (o, reason) = outcome_of(&fit.status);
                outcome = outcome.max(o);
                if let Some(r) = reason {
                    reasons.push(format!("{}: {r}", scheme.name()));
                }
                for (h, e) in fit.hs.iter().zip(&fit.errors) {
                    let h_t = sch.snr_inverse(g_s + h)? - b.s;
                    rows.push(vec![scheme.name().to_string(), num(*h), num(h_t), num(*e)]);
                }
                series.push(Series {
                    label: scheme.name().to_string(),
                    points: fit.hs.iter().copied().zip(fit.errors.iter().copied()).collect(),
                });
                let mut d = fit_detail(&fit);
                d["scheme"] = json!(scheme.name());
                d["status"] = json!(outcome_of(&fit.status).0);
                details.push(d);
            }
            Produced {
                report: StudyReport {
                    study,
                    outcome,
                    reason: (!reasons.is_empty()).then(|| reasons.join("; ")),
                    detail: json!({ "fits": details, "reference_steps": b.reference_steps }),
                    files: vec!["order_gradient.csv".into(), "order_gradient.svg".into()],
                },
                files: vec![
                    (
                        "order_gradient.csv".into(),
                        csv_bytes(&["scheme", "h_gamma", "h_t", "gradient_error"], &rows)?,
                    ),
                    (
                        "order_gradient.svg".into(),
                        loglog("single-step gradient error", "h (gamma)", "error", &series).into_bytes(),
                    ),
                ],
            }
        }
        StudyName::GreedyVsIdeal => {
            let b = &block.greedy_vs_ideal;
            let fit = greedy_vs_ideal_study(
                model,
                &GreedyIdealConfig {
                    x0: x.clone(),
                    h_max: b.h_max,
                    ratio: b.ratio,
                    n_points: b.n_points,
                    dense_steps: b.dense_steps,
                },
            )?;
            let g_end = sch.gamma(sch.t_end());
            let mut rows = Vec::new();
            for (h, e) in fit.hs.iter().zip(&fit.errors) {
                let h_t = sch.t_end() - sch.snr_inverse(g_end - h)?;
                rows.push(vec![num(*h), num(h_t), num(*e)]);
            }
            let (outcome, reason) = outcome_of(&fit.status);
            let series = [Series {
                label: "greedy vs flow Jacobian".into(),
                points: fit.hs.iter().copied().zip(fit.errors.iter().copied()).collect(),
            }];
            Produced {
                report: StudyReport {
                    study,
                    outcome,
                    reason,
                    detail: fit_detail(&fit),
                    files: vec!["greedy_vs_ideal.csv".into(), "greedy_vs_ideal.svg".into()],
                },
                files: vec![
                    (
                        "greedy_vs_ideal.csv".into(),
                        csv_bytes(&["h_gamma", "h_t", "jacobian_gap_frobenius"], &rows)?,
                    ),
                    (
                        "greedy_vs_ideal.svg".into(),
                        loglog("greedy vs ideal Jacobian", "h (gamma)", "gap", &series).into_bytes(),
                    ),
                ],
            }
        }
        StudyName::GreedyConvergence => {
            let b = &block.convergence;
            let loss = require_loss(cfg, dim, "greedy_convergence")?;
            let result = greedy_convergence_study(
                model,
                &loss,
                &ConvergenceConfig {
                    times: b.times.clone(),
                    x0: x.clone(),
                    tol: b.tol,
                    max_iters: b.max_iters,
                    dense_steps: b.dense_steps,
                    slack: b.slack,
                },
            );
            match result {
                Ok(report) => {
                    let rows: Vec<_> = report
                        .rows
                        .iter()
                        .map(|r| {
                            vec![
                                num(r.t),
                                num(r.h_gamma),
                                num(sch.t_end() - r.t),
                                r.iterations.to_string(),
                                num(r.posterior_residual),
                                num(r.r),
                                num(report.slack * report.c_hat * r.h_gamma * r.h_gamma),
                            ]
                        })
                        .collect();
                    Produced {
                        report: StudyReport {
                            study,
                            outcome: if report.passed { Outcome::Pass } else { Outcome::Fail },
                            reason: None,
                            detail: serde_json::to_value(&report).unwrap_or(Value::Null),
                            files: vec!["greedy_convergence.csv".into()],
                        },
                        files: vec![(
                            "greedy_convergence.csv".into(),
                            csv_bytes(
                                &["t", "h_gamma", "h_t", "iterations", "posterior_residual", "r", "bound"],
                                &rows,
                            )?,
                        )],
                    }
                }
                Err(e @ Error::NonConvergence { .. }) => Produced {
                    report: StudyReport {
                        study,
                        outcome: Outcome::Fail,
                        reason: Some(e.to_string()),
                        detail: Value::Null,
                        files: vec![],
                    },
                    files: vec![],
                },
                Err(e) => return Err(e.into()),
            }
        }
        StudyName::ControlAdjoint => {
            let b = &block.control;
            let loss = require_loss(cfg, dim, "control_adjoint")?;
            let report = control_adjoint_study(
                model,
                &loss,
                &ControlStudyConfig {
                    x0: x.clone(),
                    t_end: b.t_end,
                    adjoint_steps: b.adjoint_steps,
                    euler_steps: b.euler_steps.clone(),
                    reference_steps: b.reference_steps,
                },
            )?;
            let curve = control_adjoint(
                model,
                &loss,
                &SolverConfig::new(Scheme::Rk4, b.adjoint_steps).on(0.0, b.t_end),
                x,
                &AdjointConfig::default(),
            )?;
            let mut header = vec!["t".to_string()];
            for prefix in ["a_x", "a_z", "a_z_quadrature"] {
                header.extend((0..dim).map(|i| format!("{prefix}{i}")));
            }
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = (0..curve.times.len())
                .map(|i| {
                    std::iter::once(num(curve.times[i]))
                        .chain(curve.a_x[i].iter().map(|v| num(*v)))
                        .chain(curve.a_z[i].iter().map(|v| num(*v)))
                        .chain(curve.a_z_quadrature[i].iter().map(|v| num(*v)))
                        .collect()
                })
                .collect();
            let fit_rows: Vec<_> = report
                .per_step
                .hs
                .iter()
                .zip(&report.per_step.errors)
                .map(|(h, e)| vec![num(*h), num(*e)])
                .collect();
            let (fit_outcome, reason) = outcome_of(&report.per_step.status);
            let outcome = if report.quadrature.passed { fit_outcome } else { Outcome::Fail };
            let series = [Series {
                label: "per-step control gradient".into(),
                points: report
                    .per_step
                    .hs
                    .iter()
                    .copied()
                    .zip(report.per_step.errors.iter().copied())
                    .collect(),
            }];
            Produced {
                report: StudyReport {
                    study,
                    outcome,
                    reason,
                    detail: json!({ "quadrature": report.quadrature, "per_step": fit_detail(&report.per_step) }),
                    files: vec![
                        "control_adjoint_curve.csv".into(),
                        "control_adjoint_order.csv".into(),
                        "control_adjoint_order.svg".into(),
                    ],
                },
                files: vec![
                    ("control_adjoint_curve.csv".into(), csv_bytes(&header_refs, &rows)?),
                    (
                        "control_adjoint_order.csv".into(),
                        csv_bytes(&["h_t", "max_gradient_gap"], &fit_rows)?,
                    ),
                    (
                        "control_adjoint_order.svg".into(),
                        loglog("per-step control gradients", "h (t)", "gap", &series).into_bytes(),
                    ),
                ],
            }
        }
        StudyName::EngineCoherence => {
            let b = &block.coherence;
            let loss = require_loss(cfg, dim, "engine_coherence")?;
            let report = engine_coherence(
                model,
                &loss,
                x,
                &CoherenceConfig {
                    n_steps: b.n_steps,
                    scheme: b.scheme,
                    grid: b.grid,
                    adjoint: b.adjoint(),
                    t: b.t,
                },
            )?;
            Produced {
                report: StudyReport {
                    study,
                    outcome: checks_outcome(&report.checks),
                    reason: None,
                    detail: json!({ "checks": report.checks }),
                    files: vec!["engine_coherence.csv".into()],
                },
                files: vec![("engine_coherence.csv".into(), checks_csv(&report.checks)?)],
            }
        }
    };
    Ok(produced)
}

impl PartialOrd for Outcome {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Outcome {
    /// Severity order: pass, degenerate, inconclusive, fail.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}
