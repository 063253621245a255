//! Command-line pipeline for deconfounding bias correction.

pub mod config;
pub mod error;
pub mod run;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{extract_overrides, load_config};
pub use crate::error::{CliError, Result};
use crate::stages::Ctx;

#[derive(Debug, Parser)]
#[command(
    name = "dbc",
    version,
    about = "Deconfounding bias correction pipeline",
    after_help = "Any config key can be overridden with a dotted flag, e.g. --factor.lr 0.001"
)]
pub struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset with known confounders.
    Generate,
    /// Partition locations (or time) into train, validation and test.
    Split,
    /// Fit the two-source factor model.
    TrainFactor,
    /// Write inferred latents for every location.
    InferZ,
    /// Fit the bias-delta forecaster.
    TrainCorrector,
    /// Correct the test partition.
    Correct,
    /// Run one classical baseline on the test partition.
    Baseline {
        #[arg(long)]
        method: String,
    },
    /// Score every method against observations.
    Evaluate,
    /// Print the comparison table.
    Report,
    /// Run every stage in order.
    Pipeline,
}

/// Parses `args` (without the program name), runs the command and returns
/// what should go to stdout.
pub fn run(args: &[String]) -> Result<String> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("dbc".to_string()).chain(rest)).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()),
    })?;
    let cfg = load_config(cli.config.as_deref(), &overrides, cli.seed, cli.out.as_deref())?;
    let mut ctx = Ctx::open(cfg, cli.quiet)?;
    match cli.command {
        Command::Generate => stages::generate(&mut ctx)?,
        Command::Split => stages::split(&mut ctx)?,
        Command::TrainFactor => stages::train_factor(&mut ctx)?,
        Command::InferZ => stages::infer_z(&mut ctx)?,
        Command::TrainCorrector => stages::train_corrector_stage(&mut ctx)?,
        Command::Correct => stages::correct(&mut ctx)?,
        Command::Baseline { method } => stages::baseline(&mut ctx, &method)?,
        Command::Evaluate => stages::evaluate(&mut ctx)?,
        Command::Report => return stages::report(&mut ctx),
        Command::Pipeline => return stages::pipeline(&mut ctx),
    }
    Ok(String::new())
}
