use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eqflow_cli::commands;
use eqflow::task::Split;

/// Experiment runner for equilibrium flow-matching policies.
#[derive(Parser)]
#[command(name = "eqflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured head and write a checkpoint.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-loop episodes over a sweep of refinement budgets.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refinement budgets (equilibrium head) or Euler step counts
        /// (baseline head). Comma separated.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30")]
        budget: Vec<usize>,
        /// Condition split to sample episodes from.
        #[arg(long, value_parser = parse_split, default_value = "id")]
        split: Split,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
    },
    /// Detection metrics: AUROC, operating point, time saved.
    EvalOod {
        #[arg(long)]
        config: PathBuf,
        /// Equilibrium-head checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rectified-flow baseline checkpoint.
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Integrator exactness and field-vs-oracle agreement.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Interpolation-line sample points for the agreement statistics.
        #[arg(long, default_value_t = 500)]
        points: usize,
        /// Points for the quadrature-vs-monte-carlo cross-check (0 = skip).
        #[arg(long, default_value_t = 0)]
        mc_points: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: usize,
        /// Fail (exit 3) when the median cosine falls below this.
        #[arg(long)]
        min_cosine: Option<f64>,
    },
    /// Reverse-mode gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        input_dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "24,16")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 6)]
        output_dim: usize,
        /// Number of random networks to check.
        #[arg(long, default_value_t = 20)]
        nets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate run directories into a comparison table.
    Report {
        /// Run directories or roots containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "id" => Ok(Split::Id),
        "ood" => Ok(Split::Ood),
        other => Err(format!("unknown split {other:?}; expected id or ood")),
    }
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config } => {
            commands::cmd_train(&config)?;
            Ok(0)
        }
        Command::Rollout {
            config,
            checkpoint,
            budget,
            split,
            episodes,
        } => {
            commands::cmd_rollout(&config, &checkpoint, &budget, split, episodes)?;
            Ok(0)
        }
        Command::EvalOod {
            config,
            checkpoint,
            baseline,
        } => {
            commands::cmd_eval_ood(&config, &checkpoint, &baseline)?;
            Ok(0)
        }
        Command::OracleCheck {
            config,
            checkpoint,
            points,
            mc_points,
            mc_samples,
            min_cosine,
        } => {
            let (_, _, code) = commands::cmd_oracle_check(
                &config,
                checkpoint.as_deref(),
                points,
                mc_points,
                mc_samples,
                min_cosine,
            )?;
            Ok(code)
        }
        Command::Gradcheck {
            input_dim,
            hidden,
            output_dim,
            nets,
            seed,
        } => {
            let (_, code) = commands::cmd_gradcheck(input_dim, &hidden, output_dim, nets, seed)?;
            Ok(code)
        }
        Command::Report { runs } => {
            commands::cmd_report(&runs)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            // Configuration and format problems exit 1, runtime failures 2.
            let validation = err.chain().any(|c| {
                matches!(
                    c.downcast_ref::<eqflow::Error>(),
                    Some(eqflow::Error::Config(_))
                        | Some(eqflow::Error::Format(_))
                        | Some(eqflow::Error::DimMismatch { .. })
                ) || c.is::<toml::de::Error>()
            }) || err.to_string().contains("parsing config")
                || err.to_string().contains("reading config");
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
