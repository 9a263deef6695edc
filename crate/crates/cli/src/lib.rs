//! Library surface of the CLI so integration tests can reuse the config
//! loader and command implementations.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "multistream",
    about = "Train and probe multi-stream self-attention encoders",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model and write per-epoch metrics plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key config override, e.g. --override train.epochs=1.
        #[arg(long = "override", short = 'o')]
        overrides: Vec<String>,
        /// Feature container with training sequences (else generated from [task]).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out feature container.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint output path (default: checkpoint.msac).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        /// Mirror the metrics stream into this file.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out data.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", short = 'o')]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences for
    /// every parameter of the configured model.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", short = 'o')]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Coordinates checked per parameter (seeded subsample).
        #[arg(long, default_value_t = 40)]
        max_coords: usize,
        /// Frames in the probe batch.
        #[arg(long, default_value_t = 11)]
        frames: usize,
        /// Negative-control hook: corrupt the analytic pass; the check must
        /// then fail with exit code 1.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Closed-form parameter counts with an enumeration cross-check.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", short = 'o')]
        overrides: Vec<String>,
    },
    /// Generate a synthetic dataset into the feature container format.
    DataGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", short = 'o')]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the held-out split (task seed + 1).
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Run a checkpoint over a feature file and write per-frame final
    /// embeddings as a feature container.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Execute a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    use commands::*;
    let result = match cli.command {
        Command::Train { config, overrides, data, eval_data, checkpoint_out, metrics_out } => {
            cmd_train(TrainArgs { config, overrides, data, eval_data, checkpoint_out, metrics_out })
        }
        Command::Evaluate { config, overrides, checkpoint, data } => {
            cmd_evaluate(EvaluateArgs { config, overrides, checkpoint, data })
        }
        Command::GradCheck {
            config,
            overrides,
            eps,
            tolerance,
            max_coords,
            frames,
            corrupt_backward,
        } => cmd_gradcheck(GradCheckArgs {
            config,
            overrides,
            eps,
            tolerance,
            max_coords,
            frames,
            corrupt_backward,
        }),
        Command::ParamCount { config, overrides } => {
            cmd_paramcount(ParamCountArgs { config, overrides })
        }
        Command::DataGen { config, overrides, out, eval_out } => {
            cmd_datagen(DataGenArgs { config, overrides, out, eval_out })
        }
        Command::Dump { checkpoint, input, out } => cmd_dump(DumpArgs { checkpoint, input, out }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
