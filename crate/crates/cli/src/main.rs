//! `lesion`: command-line front end for the lesion classification pipeline.
//!
//! Exit codes: 0 success, 1 partial failure (some items skipped),
//! 2 usage, config or data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Status, Subset};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lesion", version, about = "Skin lesion classification pipeline")]
struct Cli {
    /// Master seed for splitting, sampling, augmentation and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with flat config keys; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stratified subsample of roughly N manifest rows.
    #[arg(long, global = true, value_name = "N")]
    limit: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply the deterministic evaluation preprocessing to a directory of images.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Stratified train/validation split of a ground-truth CSV.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val_frac: Option<f64>,
    },
    /// Train the small CNN and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Score a checkpoint: predictions, confusion matrix and report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
    },
    /// Average prediction files and score the ensemble.
    Ensemble {
        /// Two or more prediction CSVs.
        #[arg(required = true, num_args = 2..)]
        predictions: Vec<PathBuf>,
        /// Ground-truth CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.limit.is_some() {
        cfg.limit = cli.limit;
    }
    let (manifest, images) = match &cli.command {
        Command::Preprocess { .. } => (None, None),
        Command::Split { manifest, val_frac } => {
            if let Some(f) = val_frac {
                cfg.val_frac = *f;
            }
            (manifest.as_ref(), None)
        }
        Command::Train { manifest, images, .. } | Command::Eval { manifest, images, .. } => {
            (manifest.as_ref(), images.as_ref())
        }
        Command::Ensemble { manifest, .. } => (manifest.as_ref(), None),
    };
    if let Some(m) = manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(i) = images {
        cfg.image_dir = Some(i.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Status> {
    let cfg = effective_config(cli)?;
    cfg.echo()?;
    match &cli.command {
        Command::Preprocess { input } => commands::cmd_preprocess(&cfg, input),
        Command::Split { .. } => commands::cmd_split(&cfg),
        Command::Train { splits, .. } => commands::cmd_train(&cfg, splits),
        Command::Eval {
            checkpoint,
            splits,
            subset,
            ..
        } => commands::cmd_eval(&cfg, checkpoint, splits.as_deref(), *subset),
        Command::Ensemble { predictions, .. } => commands::cmd_ensemble(&cfg, predictions),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
