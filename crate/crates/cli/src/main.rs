#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pgdeblur", version, about = "Robust deblurring under mixed Poisson-Gaussian noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// `key = value` configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Instance directory written by `generate`.
    #[arg(long, global = true)]
    instance: Option<PathBuf>,
    /// Sets the noise, outlier and probe seeds to seed, seed+1, seed+2.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    size: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// talwar or standard
    #[arg(long, global = true)]
    loss: Option<String>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a test instance and write it to the output directory.
    Generate,
    /// Reconstruct at a fixed regularization parameter.
    Solve,
    /// Choose the regularization parameter by robust GCV.
    Gcv,
    /// Relative error over a log grid of regularization parameters.
    Scan,
    /// Inner iteration counts with and without the preconditioner.
    BenchPrecond,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let overrides = [
        ("out", cli.out.as_ref().map(|p| p.display().to_string())),
        ("instance", cli.instance.as_ref().map(|p| p.display().to_string())),
        ("seed", cli.seed.map(|v| v.to_string())),
        ("size", cli.size.map(|v| v.to_string())),
        ("frames", cli.frames.map(|v| v.to_string())),
        ("loss", cli.loss.clone()),
        ("beta", cli.beta.map(|v| v.to_string())),
        ("lambda", cli.lambda.map(|v| v.to_string())),
        ("sigma", cli.sigma.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Solve => commands::solve(&cfg),
        Command::Gcv => commands::gcv(&cfg),
        Command::Scan => commands::scan(&cfg),
        Command::BenchPrecond => commands::bench_precond(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
