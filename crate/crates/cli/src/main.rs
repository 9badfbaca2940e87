//! `uobs`: batch front end for the unstable obstacle problem toolkit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "uobs", version, about = "Experiments and property checks for the unstable obstacle problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "uobs-out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep going (exit 0) when a trajectory or solve does not converge.
    #[arg(long, global = true)]
    allow_unconverged: bool,
    /// Runs only the checks whose name contains this string.
    #[arg(long, global = true)]
    filter: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate the sphere coefficients and κ over a δ grid.
    Coeffs,
    /// Simulate renormalization trajectories.
    Renorm,
    /// Solve the obstacle problem on a grid.
    Solve,
    /// Blow-up analysis of a stored solution grid.
    Blowup,
    /// Run the property-check suite.
    Verify,
}

/// A failed run with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<uobs_core::Error> for Failure {
    fn from(e: uobs_core::Error) -> Self {
        use uobs_core::Error as E;
        let code = match e {
            E::NotConverged { .. } => 3,
            E::MaxIterations { .. } | E::InnerDivergence { .. } => 4,
            E::TooCoarse(_) => 5,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => config::ExperimentConfig::default(),
    };
    let opts = commands::Options {
        out: cli.out,
        seed: cli.seed,
        allow_unconverged: cli.allow_unconverged,
        filter: cli.filter,
    };
    match cli.command {
        Command::Coeffs => commands::coeffs(cfg, &opts),
        Command::Renorm => commands::renorm(cfg, &opts),
        Command::Solve => commands::solve(cfg, &opts),
        Command::Blowup => commands::blowup(cfg, &opts),
        Command::Verify => commands::verify(cfg, &opts),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
