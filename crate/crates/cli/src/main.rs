//! `normlens`: seeded, configuration-driven experiments on how batch
//! normalization and related activation-normalization schemes reshape the
//! optimization landscape of small dense networks.
//!
//! Subcommands map to measurements: `train` (loss curves and activation
//! moments), `ics` (per-layer gradient shift across preceding-layer
//! updates), `probe` (loss/gradient behavior along the gradient direction),
//! `verify` (randomized checks of the closed-form gradient and curvature
//! results), and `compare` (a matched-seed battery across schemes and update
//! schedules).
//!
//! Exit codes: 0 success, 1 configuration error, 2 divergence where it is
//! not an expected outcome, 3 verification failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN-rejecting range checks
#![allow(clippy::manual_is_multiple_of)]

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence { step: usize },
    Verification,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Divergence { .. } => 2,
            CliError::Verification => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Divergence { step } => {
                write!(f, "training diverged at step {step} (recorded in manifest)")
            }
            CliError::Verification => write!(f, "one or more checks failed (see verify.json)"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Args)]
struct CommonOpts {
    /// JSON configuration (or a manifest.json from a previous run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. --set train.lr=0.01.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,
}

impl CommonOpts {
    fn load(&self) -> Result<config::Config, CliError> {
        config::load(
            self.config.as_deref(),
            &self.sets,
            self.seed,
            self.out.as_deref(),
        )
    }
}

#[derive(Debug, Parser)]
#[command(name = "normlens", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured model; writes loss.csv and moments.csv.
    Train(CommonOpts),
    /// Measure per-layer gradient shift during training; writes ics.csv.
    Ics(CommonOpts),
    /// Probe the landscape along the gradient; writes landscape.csv and
    /// landscape_summary.csv.
    Probe(CommonOpts),
    /// Run the randomized closed-form check suite; writes verify.json.
    Verify(CommonOpts),
    /// Run a matched-seed battery of schemes/schedules; writes summary.csv.
    Compare(CommonOpts),
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap prints its own help/version output with exit code 0; map
        // genuine usage errors to the config exit code.
        if e.use_stderr() {
            CliError::config(e.to_string())
        } else {
            e.print().ok();
            std::process::exit(0);
        }
    })?;
    match &cli.command {
        Command::Train(opts) => commands::cmd_train(&opts.load()?),
        Command::Ics(opts) => commands::cmd_ics(&opts.load()?),
        Command::Probe(opts) => commands::cmd_probe(&opts.load()?),
        Command::Verify(opts) => commands::cmd_verify(&opts.load()?),
        Command::Compare(opts) => commands::cmd_compare(&opts.load()?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("normlens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
