//! `loupe` command-line interface.
//!
//! Exit codes: 0 success, 2 config error (also used by clap for usage
//! errors), 3 numeric or contract failure, 4 I/O error.

use clap::{Args, Parser, Subcommand};
use loupe_cli::commands::{self, Overrides};
use loupe_cli::error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "loupe",
    about = "Train, evaluate, and visualize a sigmoid spatial-attention module on a synthetic fine-grained task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    /// Override run.seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.out_dir from the config file
    #[arg(long)]
    out: Option<String>,
    /// Override run.precision (single|double)
    #[arg(long)]
    precision: Option<String>,
}

impl CommonOverrides {
    fn into_overrides(self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out,
            precision: self.precision,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and the best-validation checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Evaluate a checkpoint on a dataset file (read-only)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        precision: Option<String>,
    },
    /// Write attention-contour overlays for the first n test samples
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central differences (double precision)
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Central-difference step
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Train across a lambda grid with a shared seed set
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sparsity weights
        #[arg(long, default_value = "0,0.01,0.05,0.1,0.5,5.0")]
        lambdas: String,
        /// Seeds per lambda
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Generate the synthetic dataset and write it as an LFG1 file
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> loupe_cli::Result<()> {
    match cli.command {
        Command::Train { config, common } => {
            let outcome = commands::cmd_train(&config, &common.into_overrides())?;
            println!(
                "done: {} epochs, best val accuracy {:.4}, test accuracy {:.4}",
                outcome.epochs_run, outcome.best_val_accuracy, outcome.test.accuracy
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            precision,
        } => {
            let outcome = commands::cmd_eval(&checkpoint, &data, &split, precision.as_deref())?;
            let summary = serde_json::json!({
                "split": outcome.split,
                "metrics": outcome.metrics,
            });
            println!("{summary}");
            Ok(())
        }
        Command::Viz {
            checkpoint,
            data,
            n,
            out,
        } => {
            let outcome = commands::cmd_viz(&checkpoint, &data, n, &out)?;
            println!(
                "wrote {} overlays and {}",
                outcome.files.len(),
                outcome.sidecar.display()
            );
            Ok(())
        }
        Command::Gradcheck {
            config,
            eps,
            common,
        } => {
            let outcome = commands::cmd_gradcheck(&config, &common.into_overrides(), eps)?;
            if outcome.pass {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} at {}",
                    outcome.report.max_rel_err, outcome.report.worst_param
                )))
            }
        }
        Command::Sweep {
            config,
            lambdas,
            seeds,
            common,
        } => {
            let parsed: Vec<f64> = lambdas
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    CliError::Config(format!("invalid lambda list `{lambdas}`"))
                })?;
            commands::cmd_sweep(&config, &common.into_overrides(), &parsed, seeds)?;
            Ok(())
        }
        Command::GenData { config, out } => commands::cmd_gen_data(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
