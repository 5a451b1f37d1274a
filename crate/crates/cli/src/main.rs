use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use np_cli::commands;
use np_cli::config::ExperimentConfig;

/// Normalization-perturbation experiment runner.
#[derive(Parser)]
#[command(name = "np", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (embedded defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Regenerate the benchmark from the seed instead of loading it.
    #[arg(long, global = true)]
    regen: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist the synthetic benchmark.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model on the benchmark source domain.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the source and every target domain.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory (defaults to <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit domain-gap and channel-sensitivity reports for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory (defaults to <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation sweep and write its CSV tables.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Parallel sweep workers (default: config value).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn resolve(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
    Ok((config, out))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common } => {
            let (config, out) = resolve(common)?;
            commands::cmd_gen(&config, &out, common.regen)?;
        }
        Command::Train { common } => {
            let (config, out) = resolve(common)?;
            commands::cmd_train(&config, &out, common.regen)?;
        }
        Command::Eval { common, checkpoint } => {
            let (config, out) = resolve(common)?;
            commands::cmd_eval(&config, &out, checkpoint.as_deref(), common.regen)?;
        }
        Command::Diagnose { common, checkpoint } => {
            let (config, out) = resolve(common)?;
            commands::cmd_diagnose(&config, &out, checkpoint.as_deref(), common.regen)?;
        }
        Command::Sweep { common, jobs } => {
            let (config, out) = resolve(common)?;
            commands::cmd_sweep(&config, &out, *jobs)?;
        }
    }
    Ok(())
}
