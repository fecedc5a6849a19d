//! `flowguide {sample|guide|verify|train} --config <path> [--set k=v]... [--jobs N] [--seed S]`

mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "flowguide", version, about = "Guided generation experiments on flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unguided sampling: trajectories and terminal states.
    Sample(Common),
    /// Guided sampling or initial-condition optimisation.
    Guide(Common),
    /// Verification studies; the exit code is the acceptance gate.
    Verify(Common),
    /// Train a micro-MLP on a mixture target.
    Train(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set solver.n_steps=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for independent seeds and grid points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Sample(c) => ("sample", c),
        Command::Guide(c) => ("guide", c),
        Command::Verify(c) => ("verify", c),
        Command::Train(c) => ("train", c),
    };
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let (cfg, base) = config::load(&common.config, &common.overrides, common.seed)?;
    let out = output::OutputDir::create(cfg.output_dir.as_deref(), &base, &cfg.name)?;
    match name {
        "sample" => commands::sample::run(&cfg, &base, &out),
        "guide" => commands::guide::run(&cfg, &base, &out),
        "verify" => commands::verify::run(&cfg, &base, &out),
        _ => commands::train::run(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowguide: {e}");
            e.exit_code()
        }
    }
}
