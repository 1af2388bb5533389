//! `trecor`: batch front-end over the covariance-regression library, wiring
//! simulation, fitting, rank selection, network summaries, method comparison
//! and chain diagnostics into seeded, reproducible workflows.
//!
//! Exit codes: 0 success, 2 configuration or input problem, 3 numerical
//! failure inside a sampler. Every output directory carries a `meta.json`
//! with the configuration hash, the seed and the code version; reruns with
//! the same seed and inputs produce byte-identical artifacts.

mod artifacts;
mod cmd;
mod stage;

use clap::{Parser, Subcommand};

/// Consulted for the worker pool size when `--workers` is absent.
const WORKERS_ENV: &str = "TRECOR_WORKERS";

#[derive(Parser)]
#[command(
    name = "trecor",
    version,
    about = "Covariance regression on phylogenetic-tree node counts"
)]
struct Cli {
    /// Worker threads for parallel chains and replicates (overrides the
    /// TRECOR_WORKERS environment variable; default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: tree, counts, design, ground truth.
    Simulate(cmd::simulate::SimulateArgs),
    /// Run the Gibbs sampler; writes per-chain draws and diagnostics.
    Fit(cmd::fit::FitArgs),
    /// Fit candidate ranks and choose one by WAIC.
    SelectRank(cmd::select_rank::SelectRankArgs),
    /// Differential and population network summaries with FDR control.
    Network(cmd::network::NetworkArgs),
    /// Method comparison across synthetic replicates.
    Eval(cmd::eval::EvalArgs),
    /// Trace CSVs, split-chain statistics and effect-size samples.
    Diagnose(cmd::diagnose::DiagnoseArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(msg) = init_workers(cli.workers) {
        eprintln!("error: {msg}");
        std::process::exit(2);
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd::simulate::run(args),
        Command::Fit(args) => cmd::fit::run(args),
        Command::SelectRank(args) => cmd::select_rank::run(args),
        Command::Network(args) => cmd::network::run(args),
        Command::Eval(args) => cmd::eval::run(args),
        Command::Diagnose(args) => cmd::diagnose::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(stage::exit_code(&err));
    }
}

/// Bound the global worker pool; flag wins over environment, absence leaves
/// the default (one worker per core).
fn init_workers(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(raw) => Some(
                raw.parse::<usize>()
                    .map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got {raw:?}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err("worker count must be >= 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}
