//! `common-agency`: solve, simulate and sweep the common-agency contracting model.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 solver or
//! verification failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use common_agency::AgencyError;

use config::{Format, Overrides};

#[derive(Debug, Parser)]
#[command(name = "common-agency", version, about)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form bi-principal solution and benchmark comparison.
    Lq,
    /// Finite-difference solve of the aggregated and component equations.
    Hjb,
    /// Monte Carlo evaluation of equilibrium or fixed contracts.
    Simulate,
    /// Brute-force check that no tested deviation pays off.
    NashCheck,
    /// Comparative statics over one parameter.
    Sensitivity,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] AgencyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Invalid parameters point at the offending key; everything else is a
    /// solver failure.
    pub fn from_agency(e: AgencyError, section: &str) -> Self {
        match e {
            AgencyError::InvalidParams { field, reason } => CliError::Config(format!("{section}.{field}: {reason}")),
            other => CliError::Solver(other),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.out,
        format: cli.format,
        threads: cli.threads,
    };
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    output::write_resolved_config(&cfg)?;
    match cli.command {
        Command::Lq => commands::lq(&cfg),
        Command::Hjb => commands::hjb(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::NashCheck => commands::nash_check(&cfg),
        Command::Sensitivity => commands::sensitivity(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("common-agency: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
