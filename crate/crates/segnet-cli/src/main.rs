//! `segnet`: one binary for the whole pipeline. Subcommands generate
//! synthetic corpora, train video models, evaluate checkpoints, and check
//! gradients. Every run is reproducible from the config it echoes into the
//! output directory plus the seed it was given.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit code 2 for configuration and usage problems, 1 for failures at run
/// time. Clap's own usage errors also exit with 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "segnet", about = "Segment-based video recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write its manifest.
    GenData {
        /// Key=value config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the manifest and resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; all randomness derives from it.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker cap; SEGNET_THREADS is the fallback, default 1.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train a model on a corpus manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus manifest to train on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate one or more checkpoints on a corpus manifest.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate; repeat to fuse several models.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated aggregator names; default checks all of them.
        #[arg(long)]
        kinds: Option<String>,
        /// Optional directory for the JSON report; stdout always gets it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(path) = value {
        cfg.set(key, path.to_string_lossy().as_ref())?;
    }
    Ok(())
}

/// Threads resolve as flag > SEGNET_THREADS > config file > default.
fn apply_threads(cfg: &mut RunConfig, flag: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = flag {
        cfg.set("threads", &n.to_string())?;
    } else if let Ok(raw) = std::env::var("SEGNET_THREADS") {
        cfg.set("threads", raw.trim())?;
    }
    let threads: usize = cfg.parse("threads")?;
    if threads == 0 {
        return Err(CliError::Config("threads must be >= 1".into()));
    }
    Ok(())
}

fn apply_seed(cfg: &mut RunConfig, flag: Option<u64>) -> Result<(), CliError> {
    if let Some(seed) = flag {
        cfg.set("train.seed", &seed.to_string())?;
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::GenData {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            set_path(&mut cfg, "paths.out", &out)?;
            apply_seed(&mut cfg, seed)?;
            apply_threads(&mut cfg, threads)?;
            commands::gen_data(&cfg)
        }
        Command::Train {
            config,
            data,
            out,
            checkpoint,
            seed,
            threads,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            set_path(&mut cfg, "paths.data", &data)?;
            set_path(&mut cfg, "paths.out", &out)?;
            set_path(&mut cfg, "paths.checkpoint", &checkpoint)?;
            apply_seed(&mut cfg, seed)?;
            apply_threads(&mut cfg, threads)?;
            commands::train_cmd(&cfg)
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
            threads,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            set_path(&mut cfg, "paths.data", &data)?;
            set_path(&mut cfg, "paths.out", &out)?;
            if !checkpoint.is_empty() {
                let joined = checkpoint
                    .iter()
                    .map(|p| p.to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join(",");
                cfg.set("paths.checkpoint", &joined)?;
            }
            apply_threads(&mut cfg, threads)?;
            commands::eval_cmd(&cfg)
        }
        Command::Gradcheck {
            config,
            kinds,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            set_path(&mut cfg, "paths.out", &out)?;
            apply_seed(&mut cfg, seed)?;
            commands::gradcheck_cmd(&cfg, kinds.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
