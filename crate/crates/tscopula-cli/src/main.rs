//! Command-line entry points: train, evaluate, and the bivariate
//! copula-recovery demo.
//!
//! Every command is a pure function of (config file, seed, input
//! artifacts): given the same inputs it writes the same outputs. Exit
//! codes: 0 on success, 1 on runtime failures, 2 on config errors.

mod commands;
mod config;
mod data_build;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{load_config, ExperimentConfig, TrainMode};

#[derive(Parser)]
#[command(name = "tscopula", version, about = "Copula-based probabilistic time series prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (JSON, may use `extends`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the training mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Validation-evaluation worker threads (training itself is a single
    /// writer; single-worker mode is the documented deterministic setting).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Curriculum,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history, and FLOP ledger.
    Train,
    /// Evaluate a checkpoint over the config's backtest schedule.
    Eval {
        /// Checkpoint archive produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training history (defaults to history.jsonl next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run the bivariate copula-recovery experiment under both training
    /// modes and emit density figures plus the KS report.
    CopulaDemo,
}

fn apply_overrides(config: &mut ExperimentConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(mode) = cli.mode {
        config.mode = match mode {
            ModeArg::Curriculum => TrainMode::Curriculum,
            ModeArg::Joint => TrainMode::Joint,
        };
    }
    if let Some(workers) = cli.workers {
        config.train.workers = workers.max(1);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let mut config = match load_config(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    apply_overrides(&mut config, &cli);

    let result = match &cli.command {
        Command::Train => commands::train::run(&config),
        Command::Eval { checkpoint, history } => {
            commands::eval::run(&config, checkpoint, history.as_deref())
        }
        Command::CopulaDemo => commands::demo::run(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
