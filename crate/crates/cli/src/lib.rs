//! Batch experiment driver: dataset generation, MovieLens ingestion, model
//! fitting, RMSE grids, CHR sweeps, and parameter-recovery tables. Every
//! command is a pure function of (config, inputs, master seed).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
mod kv;

pub use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(pgp_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<pgp_core::Error> for CliError {
    fn from(e: pgp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(pgp_core::Error::Io(e))
    }
}

impl CliError {
    /// 2 = configuration/input error, 3 = numerical failure, 4 = IO failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                pgp_core::Error::InvalidInput(_) | pgp_core::Error::Parse(_) => 2,
                pgp_core::Error::CholeskyFailed { .. }
                | pgp_core::Error::Numerical(_)
                | pgp_core::Error::Sampler(_)
                | pgp_core::Error::NonConvergence { .. } => 3,
                pgp_core::Error::Io(_) | pgp_core::Error::Csv(_) => 4,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pgp",
    about = "Popularity learning over a Gaussian process and cache-hit-ratio evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Targeted overrides, e.g. --set replications=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic workload dataset directory.
    Gen(commands::gen::GenArgs),
    /// Convert MovieLens-style ratings into bimonthly windowed datasets.
    Ingest(commands::ingest::IngestArgs),
    /// Fit one inference backend on a dataset directory.
    Fit(commands::fit::FitArgs),
    /// Prediction-accuracy grid: RMSE of Type-1/Type-2 forecasts vs truth.
    Rmse(commands::rmse::RmseArgs),
    /// Cache-hit-ratio sweeps over capacity (synthetic or MovieLens).
    Chr(commands::chr::ChrArgs),
    /// Aggregate fitted hyperparameters into a recovery table.
    Tables(commands::tables::TablesArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_thread_pool();
    match cli.command {
        Command::Gen(args) => commands::gen::run(&args),
        Command::Ingest(args) => commands::ingest::run(&args),
        Command::Fit(args) => commands::fit::run(&args),
        Command::Rmse(args) => commands::rmse::run(&args),
        Command::Chr(args) => commands::chr::run(&args),
        Command::Tables(args) => commands::tables::run(&args),
    }
}

/// `PGP_THREADS` caps the rayon worker pool.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("PGP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
