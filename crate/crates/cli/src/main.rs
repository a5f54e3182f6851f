//! `vpt`: steady-state sweeps, parameter fits, and analyses for Lindblad
//! models from a JSON configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 non-convergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vpt", version, about = "Steady states of Lindblad models over parameter regions")]
struct Cli {
    /// JSON configuration file
    #[arg(long, global = true, env = "VPT_CONFIG")]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out", env = "VPT_OUT")]
    out: PathBuf,
    /// RNG seed override
    #[arg(long, global = true, env = "VPT_SEED")]
    seed: Option<u64>,
    /// worker threads for frontier evaluation (1 = fully serial)
    #[arg(long, global = true, default_value_t = 1, env = "VPT_THREADS")]
    threads: usize,
    /// strategy override: lu | pt | vpt | mvpt | krylov
    #[arg(long, global = true, env = "VPT_STRATEGY")]
    strategy: Option<String>,
    /// residual tolerance override
    #[arg(long, global = true, env = "VPT_TOL")]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cover a parameter grid with convergence regions and write the phase diagram
    Sweep,
    /// Fit unknown generator parameters to a measured dataset
    Fit,
    /// Generate a synthetic dataset with seeded Gaussian noise
    GenerateData,
    /// Optimal low-rank (SVD) analysis of convergence regions
    SvdAnalysis,
    /// Time every strategy on one plan
    Bench,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config <path> is required (or set VPT_CONFIG)");
            return ExitCode::from(2);
        }
    };
    let (config, text) = match config::load_config(&config_path) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let overrides = commands::Overrides {
        seed: cli.seed,
        strategy: cli.strategy.clone(),
        tolerance: cli.tol,
        threads: cli.threads.max(1),
    };
    let result = match cli.command {
        Command::Sweep => commands::cmd_sweep(&config, &text, &cli.out, &overrides),
        Command::Fit => commands::cmd_fit(&config, &text, &cli.out, &overrides),
        Command::GenerateData => commands::cmd_generate_data(&config, &text, &cli.out, &overrides),
        Command::SvdAnalysis => commands::cmd_svd_analysis(&config, &text, &cli.out, &overrides),
        Command::Bench => commands::cmd_bench(&config, &text, &cli.out, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &anyhow::Error) -> u8 {
    if let Some(core) = e.downcast_ref::<vpt_core::Error>() {
        use vpt_core::Error::*;
        return match core {
            NonConvergentPoint { .. } | NonConvergent(_) | MaxIterationsExceeded => 4,
            InvalidParameter(_) | Parse(_) | EmptyInput(_) => 2,
            _ => 3,
        };
    }
    // config-shaped problems (missing sections, bad files) are usage errors
    let text = format!("{e}");
    if text.contains("config") || text.contains("dataset") || text.contains("unknown") {
        2
    } else if text.contains("iteration budget") {
        4
    } else {
        3
    }
}
