//! Command-line driver: synthetic scenes, noisy-label pretraining, EM label
//! refinement, evaluation against truth, and hyper-parameter sweeps.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emseg::error::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "emseg", version, about = "Segmentation from misregistered polyline labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Path to a key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (features + truth and noisy polylines).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train a model on the rasterized noisy labels.
    Pretrain {
        /// Directory holding the scene files.
        scene_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run EM label-refinement iterations from a pretrained checkpoint.
    Em {
        scene_dir: PathBuf,
        /// Pretrained SEGM1 checkpoint.
        #[arg(long)]
        pretrained: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate checkpoints on held-out test windows against true labels.
    Eval {
        scene_dir: PathBuf,
        /// SEGM1 checkpoint(s); one metrics row each.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the EM loop across the epsilon x top-K grid.
    Sweep {
        scene_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap already formats help/version output; pass it through.
        if e.use_stderr() {
            Error::Config(e.to_string())
        } else {
            print!("{e}");
            std::process::exit(0);
        }
    })?;
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            commands::cmd_synth(&cfg, &common.out)
        }
        Command::Pretrain { scene_dir, common } => {
            let cfg = load_config(&common)?;
            commands::cmd_pretrain(&scene_dir, &cfg, &common.out)
        }
        Command::Em {
            scene_dir,
            pretrained,
            common,
        } => {
            let cfg = load_config(&common)?;
            commands::cmd_em(&scene_dir, &pretrained, &cfg, &common.out)
        }
        Command::Eval {
            scene_dir,
            model,
            common,
        } => {
            let cfg = load_config(&common)?;
            commands::cmd_eval(&scene_dir, &model, &cfg, &common.out)
        }
        Command::Sweep { scene_dir, common } => {
            let cfg = load_config(&common)?;
            commands::cmd_sweep(&scene_dir, &cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 1,
                Error::Io { .. } | Error::Format { .. } => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
