use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dcrmta_core::attribution::AttributionError;
use dcrmta_core::datahub::DataError;
use dcrmta_core::fusion_model::ModelError;
use dcrmta_core::replay::ReplayError;

mod commands;
mod config;
mod plot;

use commands::{Ablation, Ctx, SplitArg, TrainArgs};
use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dcrmta", version, about = "Conversion prediction, touchpoint attribution and budget replay")]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override: data seed for `gen`, model seeds for `train`, sampling seed for `attribute`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Journey file (overrides `dataset`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Gen,
    /// Group a raw event log into journeys.
    Import {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a model and save a checkpoint plus its training history.
    Train {
        #[arg(long, value_enum, default_value = "none")]
        ablation: Ablation,
        /// Override the counterfactual loss weight.
        #[arg(long)]
        gamma: Option<f64>,
        /// Train the logistic-regression baseline instead.
        #[arg(long)]
        lr: bool,
        /// File prefix for outputs.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Shapley credits per converting journey and per channel.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Replay the log under reduced budgets.
    Replay {
        /// Attribution report(s); the first one fixes the credited touches.
        #[arg(long, required = true)]
        attribution: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(ds) = cli.dataset {
        cfg.dataset = Some(ds);
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Gen => cfg.data_seed = seed,
            Command::Train { .. } => {
                cfg.model.init_seed = seed;
                cfg.model.shuffle_seed = seed.wrapping_add(1);
                cfg.model.fake_map_seed = seed.wrapping_add(2);
            }
            Command::Attribute { .. } => cfg.attribution.seed = seed,
            _ => log::warn!("--seed has no effect on this command"),
        }
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, plot: cli.plot };
    match cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Import { input } => commands::import(&ctx, input),
        Command::Train { ablation, gamma, lr, tag } => {
            commands::train_cmd(&ctx, &TrainArgs { ablation, gamma, baseline_lr: lr, tag, seed: cli.seed })
        }
        Command::Eval { checkpoint, split } => commands::eval_cmd(&ctx, &checkpoint, split),
        Command::Attribute { checkpoint, split } => commands::attribute_cmd(&ctx, &checkpoint, split),
        Command::Replay { attribution, split } => commands::replay_cmd(&ctx, &attribution, split),
    }
}

fn model_code(e: &ModelError) -> Option<u8> {
    match e {
        ModelError::Divergence { .. } => Some(4),
        ModelError::Config(_) => Some(2),
        ModelError::Data(_) | ModelError::Checkpoint(_) | ModelError::Io { .. } => Some(3),
        ModelError::Diff(_) => None,
    }
}

/// 2 config, 3 data, 4 divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if cause.is::<ConfigError>() {
            Some(2)
        } else if cause.is::<DataError>() {
            Some(3)
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            model_code(e)
        } else if let Some(e) = cause.downcast_ref::<AttributionError>() {
            match e {
                AttributionError::Invalid(_) => Some(2),
                AttributionError::Model(m) => model_code(m),
                _ => Some(3),
            }
        } else if let Some(e) = cause.downcast_ref::<ReplayError>() {
            Some(if matches!(e, ReplayError::Invalid(_)) { 2 } else { 3 })
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
