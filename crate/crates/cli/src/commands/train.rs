use serde::Serialize;

use flowguide::models::{train_micro_mlp, TrainReport};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{num, OutputDir};

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    n_params: usize,
    heldout_loss: f64,
    baseline_loss: f64,
    threshold: f64,
    weights: &'static str,
}

pub fn run(cfg: &ExperimentConfig, out: &OutputDir) -> Result<(), CliError> {
    let block = cfg
        .train
        .as_ref()
        .ok_or_else(|| CliError::config("train", "the train command needs a [train] block"))?;
    let target = cfg.mixture()?;
    let (net, report): (_, TrainReport) = train_micro_mlp(&target, &cfg.schedule()?, &block.to_config(cfg.seed))?;
    out.write_bytes("weights.bin", &net.to_bytes())?;
    let rows: Vec<Vec<String>> = report
        .loss_curve
        .iter()
        .map(|(step, loss)| vec![step.to_string(), num(*loss)])
        .collect();
    out.write_csv("loss_curve.csv", &["step".into(), "train_loss".into()], &rows)?;
    out.write_json(
        "summary.json",
        &Summary {
            command: "train",
            config: cfg,
            n_params: net.n_params(),
            heldout_loss: report.heldout_loss,
            baseline_loss: report.baseline_loss,
            threshold: report.threshold,
            weights: "weights.bin",
        },
    )?;
    Ok(())
}
