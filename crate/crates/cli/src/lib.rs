//! Command-line front end: reads a flat TOML config, runs a solver or
//! experiment and writes deterministic CSV/JSON artifacts.
//!
//! Exit codes: 0 success, 1 input error, 2 infeasible, 3 convergence failure.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{Objective, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "repalloc", version, about = "Representative allocation solver and auction simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub trials: Option<u32>,
    #[arg(long, global = true)]
    pub auctions: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub objective: Option<Objective>,
    /// Sample file for fit-landscape (one price per line).
    #[arg(long, global = true)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve one contract; writes allocation.csv, strategy.json, diagnostics.json.
    SolveSingle,
    /// Solve a contract set jointly; writes allocation.csv, strategy.json, diagnostics.json.
    SolveMulti,
    /// Solve, convert to bids and simulate; writes sim_report.csv, sim_summary.json.
    Simulate,
    /// Delivery and spend experiments over a σ grid.
    Replicate,
    /// Empirical quantile table and lognormal fit of a price sample; writes landscape.json.
    FitLandscape,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Solver(#[from] repalloc::Error),
    #[error("{0}")]
    NotDecentralizable(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::NotDecentralizable(_) => 2,
            CliError::Solver(e) if e.is_infeasible() || matches!(e, repalloc::Error::OverDemand { .. }) => 2,
            CliError::Solver(e) if e.is_convergence_failure() => 3,
            CliError::Solver(_) => 1,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out).map_err(|source| CliError::Io {
        path: cli.out.clone(),
        source,
    })?;
    match cli.command {
        Command::SolveSingle => commands::solve_single(cli, &cfg),
        Command::SolveMulti => commands::solve_multi(cli, &cfg),
        Command::Simulate => commands::simulate(cli, &cfg),
        Command::Replicate => commands::replicate(cli, &cfg),
        Command::FitLandscape => commands::fit_landscape(cli, &cfg),
    }
}
