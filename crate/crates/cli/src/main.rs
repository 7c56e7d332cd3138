//! `semalign`: synthetic data generation, margin inspection, experiment
//! grids and gradient verification.
//!
//! Exit codes: 0 success, 2 config or input error, 3 training failure,
//! 4 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const INPUT: u8 = 2;
    pub const TRAINING: u8 = 3;
    pub const VERIFICATION: u8 = 4;

    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: Self::INPUT,
            message: message.into(),
        }
    }
}

impl From<semalign::Error> for CliError {
    fn from(e: semalign::Error) -> Self {
        use semalign::Error as E;
        let code = match e {
            E::Divergence { .. } | E::DegenerateFeature { .. } | E::Evaluation(_) => {
                CliError::TRAINING
            }
            _ => CliError::INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "semalign",
    version,
    about = "Semantic alignment few-shot experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set finetune_sgd.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Similarity and margin matrices of an embedding file.
    Margins {
        /// Embedding file: header `C D`, then `name v1 .. vD` per class.
        embeddings: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Similar classes per row that may receive a margin, or `all`.
        #[arg(long, default_value = "3")]
        k: semalign::embeddings::TopK,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Run the configured experiment grid.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parent directory; results go in a subdirectory named by config hash.
        #[arg(long, value_name = "DIR", default_value = "runs")]
        out: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck {
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        dim_raw: usize,
        #[arg(long, default_value_t = 5)]
        dim_feat: usize,
        #[arg(long, default_value_t = 4)]
        dim_text: usize,
        #[arg(long, default_value_t = 3)]
        inter_dim: usize,
        /// Perturb one group's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<semalign::harness::ParamGroup>,
    },
    /// Generate a synthetic dataset and its embedding file.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR", default_value = "synth")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Margins {
            embeddings,
            gamma,
            k,
            out,
        } => commands::margins(&embeddings, gamma, k, &out),
        Command::Run { config, out, seed } => {
            commands::run(config.config.as_deref(), &config.overrides, &out, seed)
        }
        Command::Gradcheck {
            seed,
            seeds,
            batch,
            classes,
            dim_raw,
            dim_feat,
            dim_text,
            inter_dim,
            corrupt,
        } => {
            let cfg = semalign::gradsuite::GradSuiteConfig {
                seed,
                batch,
                classes,
                dim_raw,
                dim_feat,
                dim_text,
                inter_dim,
                ..Default::default()
            };
            commands::gradcheck(&cfg, seeds, corrupt)
        }
        Command::Synth { config, out, seed } => {
            commands::synth(config.config.as_deref(), &config.overrides, &out, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
