mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Expressive performance rendering: tokenize MIDI, prepare datasets, train,
/// render and evaluate.
#[derive(Debug, Parser)]
#[command(name = "pianoform", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Flat key = value TOML file with model and training settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set batch_size=4`. Repeatable; wins over --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for splits, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base directory for relative input paths.
    #[arg(long, global = true, env = "PIANOFORM_DATA_ROOT", value_name = "DIR")]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the token dump of a MIDI file, one note per line.
    Tokenize {
        midi: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a token dump back into a MIDI file.
    Detokenize {
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a windowed dataset from a manifest of score/performance pairs.
    Prepare {
        manifest: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Notes per window.
        #[arg(long, default_value_t = pianoform_core::features::DEFAULT_WINDOW)]
        window: usize,
    },
    /// Train on a prepared dataset.
    Train {
        dataset: PathBuf,
        /// Run directory for checkpoints and the epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, usually `<run>/last.ckpt`.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Render a performance for a score with a trained checkpoint.
    Render {
        score: PathBuf,
        #[arg(long)]
        pianist: String,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Output MIDI file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Losses, average errors and velocity distributions on a dataset split.
    Eval {
        dataset: PathBuf,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Velocity distributions, overlaps and expression curves of MIDI groups.
    Stats {
        /// `LABEL=PATH` where PATH is a MIDI file or a directory of them.
        /// Labels may carry a source tag, e.g. `alice/P`.
        #[arg(required = true, value_name = "LABEL=PATH")]
        groups: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Moving-average window for expression curves (odd).
        #[arg(long, default_value_t = pianoform_core::eval::DEFAULT_SMOOTHING)]
        smoothing: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
