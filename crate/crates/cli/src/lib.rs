//! `rpg` experiment runner.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad config or flags,
//! 3 I/O or numerical failure.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rpg", version, about = "Regularized policy gradient experiments on finite outcome spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Finite-difference check of all surrogate gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Bias of the GRPO k3 penalty gradient against the corrected estimator.
    AuditGrpo(commands::AuditArgs),
    /// One training run from a TOML config.
    Train(commands::TrainArgs),
    /// Monte Carlo study of the k1/k2/k3 divergence estimators.
    Estimate(commands::EstimateArgs),
    /// The same training config over several seeds, in parallel.
    Sweep(commands::SweepArgs),
}

pub fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        CliCommand::Gradcheck(a) => commands::gradcheck(a, argv),
        CliCommand::AuditGrpo(a) => commands::audit_grpo(a, argv),
        CliCommand::Train(a) => commands::train(a, argv),
        CliCommand::Estimate(a) => commands::estimate(a, argv),
        CliCommand::Sweep(a) => commands::sweep(a, argv),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rpg: {e}");
            e.exit_code()
        }
    }
}
