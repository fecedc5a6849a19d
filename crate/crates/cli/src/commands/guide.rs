use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use flowguide::linalg::Vector;
use flowguide::models::PosteriorModel;
use flowguide::solvers::{solve, SolverConfig};
use flowguide::tasks::{e2e_optimize_x0, guided_sample, hit_rate, noise_for_seed, GuidanceRun, GuidedOutcome, OptimizeOutcome};

use super::{mean, row, xy};
use crate::config::{BuiltLoss, ExperimentConfig, GuideBlock, GuideMode};
use crate::error::CliError;
use crate::output::{coord_columns, num, OutputDir};
use crate::svg::{scatter, Series};

#[derive(Serialize)]
struct Arm {
    mean_terminal_loss: f64,
    mean_distance: Option<f64>,
    hit_rate: Option<f64>,
}

#[derive(Serialize)]
struct GuidedSummary<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    n_samples: usize,
    hit_radius: f64,
    guided: Arm,
    /// The same seeds without guidance, so thresholds can be set from this run.
    unguided: Arm,
    guided_terminal_mean: Option<Vec<f64>>,
    files: Vec<&'static str>,
}

#[derive(Serialize)]
struct OptimizeSummary<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    n_samples: usize,
    mean_best_loss: f64,
    aborted: Vec<usize>,
    /// Fraction of samples with measurement residual below the noise level.
    solved_fraction: Option<f64>,
    files: Vec<&'static str>,
}

fn arm(terminals: &[Vector], losses: &[f64], reference: Option<&Vector>, radius: f64) -> Arm {
    let n = losses.len().max(1) as f64;
    Arm {
        mean_terminal_loss: losses.iter().sum::<f64>() / n,
        mean_distance: reference.map(|r| terminals.iter().map(|x| (x - r).norm()).sum::<f64>() / n),
        hit_rate: reference.map(|r| hit_rate(terminals, r, radius)),
    }
}

pub fn run(cfg: &ExperimentConfig, base: &Path, out: &OutputDir) -> Result<(), CliError> {
    let block = cfg
        .guide
        .as_ref()
        .ok_or_else(|| CliError::config("guide", "the guide command needs a [guide] block"))?;
    if block.n_samples == 0 {
        return Err(CliError::config("guide.n_samples", "must be at least 1"));
    }
    let model = cfg.model(base)?;
    let loss = cfg.loss(model.dim())?;
    let solver = cfg.solver.to_config()?;
    match block.mode {
        GuideMode::GuidedSample => guided(cfg, block, &model, &loss, solver, out),
        GuideMode::OptimizeX0 => optimize(cfg, block, &model, &loss, &solver, out),
    }
}

fn guided(
    cfg: &ExperimentConfig,
    block: &GuideBlock,
    model: &PosteriorModel,
    loss: &BuiltLoss,
    solver: SolverConfig,
    out: &OutputDir,
) -> Result<(), CliError> {
    if !(block.hit_radius > 0.0) {
        return Err(CliError::config("guide.hit_radius", "must be positive"));
    }
    let loss_fn = loss.loss_spec();
    let reference = loss.reference();
    let dim = model.dim();
    let run = GuidanceRun {
        engine: block.engine,
        eta_schedule: block.eta_schedule,
        inner_steps: block.inner_steps,
        solver,
        seed: cfg.seed,
    };
    run.validate()?;
    let results: Vec<(GuidedOutcome, Vector)> = (0..block.n_samples)
        .into_par_iter()
        .map(|i| {
            let x0 = noise_for_seed(dim, cfg.seed.wrapping_add(i as u64));
            let guided = guided_sample(model, &run, &loss_fn, &x0, reference.as_ref())
                .map_err(|e| CliError::from(e).with_context(&format!("sample {i}")))?;
            let plain = solve(model, &run.solver, &x0)?.terminal().clone();
            Ok((guided, plain))
        })
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    for (i, (g, _)) in results.iter().enumerate() {
        for (n, l) in g.loss_curve.iter().enumerate() {
            rows.push(vec![i.to_string(), n.to_string(), num(g.trajectory.times[n]), num(*l)]);
        }
    }
    out.write_csv(
        "loss_curves.csv",
        &["sample".into(), "step".into(), "t".into(), "loss_of_posterior_mean".into()],
        &rows,
    )?;

    let guided_ends: Vec<Vector> = results.iter().map(|(g, _)| g.trajectory.terminal().clone()).collect();
    let plain_ends: Vec<Vector> = results.iter().map(|(_, p)| p.clone()).collect();
    let mut header = vec!["sample".to_string()];
    header.extend(coord_columns("guided_x", dim));
    header.extend(coord_columns("unguided_x", dim));
    let rows: Vec<_> = guided_ends
        .iter()
        .zip(&plain_ends)
        .enumerate()
        .map(|(i, (g, p))| {
            let mut r = row(&[i.to_string()], g);
            r.extend(p.iter().map(|v| num(*v)));
            r
        })
        .collect();
    out.write_csv("terminals.csv", &header, &rows)?;

    let sets = [
        Series {
            label: "unguided".into(),
            points: plain_ends.iter().map(xy).collect(),
        },
        Series {
            label: "guided".into(),
            points: guided_ends.iter().map(xy).collect(),
        },
    ];
    let paths: Vec<Vec<(f64, f64)>> = results
        .iter()
        .take(50)
        .map(|(g, _)| g.trajectory.states.iter().map(xy).collect())
        .collect();
    out.write_bytes("terminals.svg", scatter(&cfg.name, &sets, &paths).as_bytes())?;

    let guided_losses: Vec<f64> = results.iter().map(|(g, _)| g.metrics.terminal_loss).collect();
    let plain_losses: Vec<f64> = plain_ends.iter().map(|x| loss_fn.value(x)).collect();
    out.write_json(
        "summary.json",
        &GuidedSummary {
            command: "guide",
            config: cfg,
            n_samples: block.n_samples,
            hit_radius: block.hit_radius,
            guided: arm(&guided_ends, &guided_losses, reference.as_ref(), block.hit_radius),
            unguided: arm(&plain_ends, &plain_losses, reference.as_ref(), block.hit_radius),
            guided_terminal_mean: mean(&guided_ends),
            files: vec!["loss_curves.csv", "terminals.csv", "terminals.svg"],
        },
    )?;
    Ok(())
}

fn optimize(
    cfg: &ExperimentConfig,
    block: &GuideBlock,
    model: &PosteriorModel,
    loss: &BuiltLoss,
    solver: &SolverConfig,
    out: &OutputDir,
) -> Result<(), CliError> {
    let loss_fn = loss.loss_spec();
    let dim = model.dim();
    let results: Vec<(OptimizeOutcome, Vector)> = (0..block.n_samples)
        .into_par_iter()
        .map(|i| {
            let x0 = noise_for_seed(dim, cfg.seed.wrapping_add(i as u64));
            let res = e2e_optimize_x0(model, &loss_fn, solver, &block.optimize, &x0)?;
            let x1 = solve(model, solver, &res.x0)?.terminal().clone();
            Ok((res, x1))
        })
        .collect::<Result<_, CliError>>()?;

    let rows: Vec<Vec<String>> = results
        .iter()
        .enumerate()
        .flat_map(|(i, (r, _))| {
            r.history
                .iter()
                .enumerate()
                .map(move |(k, l)| vec![i.to_string(), k.to_string(), num(*l)])
        })
        .collect();
    out.write_csv("history.csv", &["sample".into(), "iteration".into(), "terminal_loss".into()], &rows)?;

    let mut header = vec!["sample".to_string()];
    header.extend(coord_columns("x0_", dim));
    header.extend(coord_columns("x1_", dim));
    let rows: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(i, (r, x1))| {
            let mut row_ = row(&[i.to_string()], &r.x0);
            row_.extend(x1.iter().map(|v| num(*v)));
            row_
        })
        .collect();
    out.write_csv("optimized.csv", &header, &rows)?;

    let aborted: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| r.aborted_at.is_some())
        .map(|(i, _)| i)
        .collect();
    let solved_fraction = match loss {
        BuiltLoss::Inverse(p) => {
            let solved = results.iter().filter(|(_, x1)| p.residual(x1) < p.beta).count();
            Some(solved as f64 / results.len() as f64)
        }
        BuiltLoss::Plain(_) => None,
    };
    let n = results.len() as f64;
    out.write_json(
        "summary.json",
        &OptimizeSummary {
            command: "guide",
            config: cfg,
            n_samples: block.n_samples,
            mean_best_loss: results.iter().map(|(r, _)| r.best_loss).sum::<f64>() / n,
            aborted: aborted.clone(),
            solved_fraction,
            files: vec!["history.csv", "optimized.csv"],
        },
    )?;
    if !aborted.is_empty() {
        return Err(CliError::Divergence(format!(
            "optimisation hit a non-finite loss for samples {aborted:?}; histories were written"
        )));
    }
    Ok(())
}
