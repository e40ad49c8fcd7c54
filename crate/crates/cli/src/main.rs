//! `gmwb`: price GMWB contracts, solve for fair fees, map optimal withdrawals
//! and cross-check against Monte Carlo.
// Guards are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Invocation;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gmwb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults reproduce the validation setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Refinement level, overriding `grid.level` (for `converge` and
    /// `kernel-diag`: levels 0..=LEVEL instead of `run.levels`).
    #[arg(long, global = true)]
    level: Option<usize>,
    /// CSV destination instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo seed, overriding `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo paths.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Contract value at the initial state.
    Price,
    /// Fee that makes the contract value equal the premium.
    Fee,
    /// Optimal withdrawals over balance and guarantee at one date and rate.
    Controls,
    /// Replay stored withdrawals along simulated paths.
    McValidate,
    /// Truncation multiple and weight diagnostics of the transition kernel, per level.
    KernelDiag,
    /// Prices over successive levels with convergence ratios.
    Converge,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = cli.level {
        cfg.grid.level = l;
    }
    if let Some(s) = cli.seed {
        cfg.mc.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let levels: Vec<usize> = match (&cli.command, cli.level) {
        (Command::Converge | Command::KernelDiag, Some(l)) => (0..=l).collect(),
        (Command::Converge | Command::KernelDiag, None) => cfg.run.levels.clone(),
        _ => vec![cfg.grid.level],
    };
    if levels.is_empty() {
        return Err(CliError::Usage("run.levels is empty".into()));
    }
    cfg.validate(levels[0])?;
    let out = cli.out.or_else(|| cfg.run.out.clone());
    let inv = Invocation { cfg, out };
    match cli.command {
        Command::Price => commands::price(&inv),
        Command::Fee => commands::fee(&inv),
        Command::Controls => commands::controls(&inv),
        Command::McValidate => commands::mc_validate(&inv),
        Command::KernelDiag => commands::kernel_diag(&inv, &levels),
        Command::Converge => commands::converge(&inv, &levels),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
