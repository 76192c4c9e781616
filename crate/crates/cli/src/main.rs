//! `pdqat`: train quantization-robust models with primal-dual constrained
//! learning, rank layer sensitivity from the dual variables, and evaluate
//! mixed-precision assignments.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdqat_core::error::Error;

mod commands;

#[derive(Parser)]
#[command(
    name = "pdqat",
    version,
    about = "Primal-dual quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes metrics.csv and checkpoint.bin.
    Train {
        /// Path to the run configuration (TOML).
        config: PathBuf,
        /// Train the straight-through baseline instead of the primal-dual loop.
        #[arg(long)]
        baseline: bool,
    },
    /// Rank layers by their dual variables; writes rank.csv.
    Rank {
        /// Path to a checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Ranking statistic: final multipliers or their trajectory mean.
        #[arg(long, default_value = "final", value_parser = ["final", "mean"])]
        stat: String,
        /// Output directory (defaults to the checkpoint's configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate mixed-precision assignments from a checkpoint; writes mixed_eval.csv.
    MixedEval {
        checkpoint: PathBuf,
        /// How many ranked layers to move to high precision.
        #[arg(long)]
        k: usize,
        /// Choose the layers with the largest or smallest multipliers.
        #[arg(long, value_parser = ["top", "bottom"])]
        mode: String,
        /// Retrain with these seeds (comma separated) instead of evaluating
        /// the checkpoint directly.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Evaluate on the train or test split.
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of a constraint bound; writes sweep.csv.
    Sweep {
        config: PathBuf,
        /// Which bound to sweep.
        #[arg(long, value_parser = ["eps_out", "eps_layer"])]
        param: String,
        /// Comma-separated bound values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Worker threads for the sweep (runs are independent).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Probe the objective as a function of one constraint bound; writes probe.csv.
    Probe {
        config: PathBuf,
        /// Which bound the grid applies to.
        #[arg(long, default_value = "eps_out", value_parser = ["eps_out", "eps_layer"])]
        param: String,
        /// Strictly increasing grid of bound values (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Layer id (1-based) when probing a layerwise bound.
        #[arg(long)]
        layer: Option<usize>,
        /// Flag runs whose final objective exceeds this threshold.
        #[arg(long)]
        convergence_loss: Option<f64>,
    },
    /// Check analytic Lagrangian gradients against finite differences.
    Gradcheck {
        config: PathBuf,
        /// Number of random generic points to test.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, baseline } => commands::train(&config, baseline),
        Command::Rank {
            checkpoint,
            stat,
            out,
        } => commands::rank(&checkpoint, &stat, out),
        Command::MixedEval {
            checkpoint,
            k,
            mode,
            seeds,
            split,
            out,
        } => commands::mixed_eval(&checkpoint, k, &mode, &seeds, &split, out),
        Command::Sweep {
            config,
            param,
            values,
            jobs,
        } => commands::sweep(&config, &param, &values, jobs),
        Command::Probe {
            config,
            param,
            grid,
            layer,
            convergence_loss,
        } => commands::probe(&config, &param, &grid, layer, convergence_loss),
        Command::Gradcheck { config, points } => commands::gradcheck(&config, points),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
