use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use flowguide::solvers::{solve, solve_reparam_gamma, Trajectory};
use flowguide::tasks::noise_for_seed;

use super::{mean, row, xy};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{coord_columns, num, OutputDir};
use crate::svg::{scatter, Series};

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    dim: usize,
    n_samples: usize,
    terminal_mean: Option<Vec<f64>>,
    files: Vec<&'static str>,
}

pub fn run(cfg: &ExperimentConfig, base: &Path, out: &OutputDir) -> Result<(), CliError> {
    let model = cfg.model(base)?;
    let solver = cfg.solver.to_config()?;
    let block = cfg.sample.clone().unwrap_or(crate::config::SampleBlock {
        n_samples: 1,
        reparam_gamma: false,
    });
    if block.n_samples == 0 {
        return Err(CliError::config("sample.n_samples", "must be at least 1"));
    }
    let dim = model.dim();
    let trajectories: Vec<Trajectory> = (0..block.n_samples)
        .into_par_iter()
        .map(|i| {
            let x0 = noise_for_seed(dim, cfg.seed.wrapping_add(i as u64));
            if block.reparam_gamma {
                solve_reparam_gamma(&model, &solver, &x0)
            } else {
                solve(&model, &solver, &x0)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut header = vec!["sample".to_string(), "step".to_string(), "t".to_string()];
    header.extend(coord_columns("x", dim));
    let mut rows = Vec::new();
    for (i, traj) in trajectories.iter().enumerate() {
        for (n, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
            rows.push(row(&[i.to_string(), n.to_string(), num(*t)], x));
        }
    }
    out.write_csv("trajectories.csv", &header, &rows)?;

    let terminals: Vec<_> = trajectories.iter().map(|t| t.terminal().clone()).collect();
    let mut header = vec!["sample".to_string()];
    header.extend(coord_columns("x", dim));
    let rows: Vec<_> = terminals.iter().enumerate().map(|(i, x)| row(&[i.to_string()], x)).collect();
    out.write_csv("terminals.csv", &header, &rows)?;

    let paths: Vec<Vec<(f64, f64)>> = trajectories
        .iter()
        .take(50)
        .map(|t| t.states.iter().map(xy).collect())
        .collect();
    let ends = Series {
        label: "terminal states".into(),
        points: terminals.iter().map(xy).collect(),
    };
    out.write_bytes("trajectories.svg", scatter(&cfg.name, &[ends], &paths).as_bytes())?;

    out.write_json(
        "summary.json",
        &Summary {
            command: "sample",
            config: cfg,
            dim,
            n_samples: block.n_samples,
            terminal_mean: mean(&terminals),
            files: vec!["trajectories.csv", "terminals.csv", "trajectories.svg"],
        },
    )?;
    Ok(())
}
