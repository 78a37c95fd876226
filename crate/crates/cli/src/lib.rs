//! Command-line orchestration: configuration, run manifests and CSV output.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{execute, Command};
use crate::config::{Profile, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lyapresp::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0} sweep row(s) diverged; rerun with --allow-partial to accept")]
    Partial(usize),
    #[error("{0}")]
    NoPlateau(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Partial(_) => 3,
            CliError::NoPlateau(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lyapresp", version, about = "Response of the largest Lyapunov exponent of Lorenz 96 to constant forcing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// TOML run configuration; every field is required.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Built-in settings used when no --config is given.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Independent trajectory shards for the response accumulation.
    #[arg(long, global = true, value_name = "INT")]
    pub shards: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Exit successfully even if some sweep rows diverged.
    #[arg(long, global = true)]
    pub allow_partial: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CliCommand {
    /// Fit the scaling (α, β) to zero mean and unit variance.
    Calibrate,
    /// Largest Lyapunov exponent with its convergence trace.
    Lyapunov,
    /// Correlation functions, response curve and plateau selection.
    Response,
    /// Direct-perturbation sweep and fits.
    Sweep,
    /// Node-pooled lag autocorrelation.
    Autocorr,
    /// Whole pipeline with a combined summary.
    Report,
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::profile(self.profile.unwrap_or(Profile::Desk)),
        };
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(shards) = self.shards {
            config.run.shards = shards;
        }
        if let Some(out) = &self.out {
            config.run.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.resolve_config()?;
    let command = match cli.command {
        CliCommand::PrintConfig => {
            print!("{}", config.to_toml());
            return Ok(());
        }
        CliCommand::Calibrate => Command::Calibrate,
        CliCommand::Lyapunov => Command::Lyapunov,
        CliCommand::Response => Command::Response,
        CliCommand::Sweep => Command::Sweep,
        CliCommand::Autocorr => Command::Autocorr,
        CliCommand::Report => Command::Report,
    };
    let done = execute(command, &config)?;
    println!("{}: outputs in {}", command.name(), config.run.out_dir.display());
    for (file, sum) in &done.manifest.outputs {
        println!("  {file}  sha256:{sum}");
    }
    if done.missing_rows > 0 && !cli.allow_partial {
        return Err(CliError::Partial(done.missing_rows));
    }
    if let Some(e) = done.plateau_error {
        return Err(CliError::NoPlateau(e));
    }
    Ok(())
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
