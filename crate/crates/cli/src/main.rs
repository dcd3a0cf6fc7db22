//! `langdis` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "langdis", version, about = "Language-disentangled speaker embeddings: data, training, protocols and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags win over `--config`/`--from`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, conflicts_with = "from")]
    pub config: Option<PathBuf>,
    /// Reuse the configuration embedded in an artifact (checkpoint, trial list, report).
    #[arg(long, global = true)]
    pub from: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lambda=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for the command's own randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `sequential` or `parallel` scoring.
    #[arg(long, global = true)]
    pub exec: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Metadata CSV (`utteranceId,speakerId,languageId,split`).
    #[arg(long)]
    pub metadata: PathBuf,
    /// Binary feature store.
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bilingual corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the cross-lingual trial list.
    BuildTrials {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to draw utterances from: train, eval or all.
        #[arg(long, default_value = "eval")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check a trial list against the protocol rules.
    ValidateTrials {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Also check the selection caps from the configuration.
        #[arg(long)]
        check_caps: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Write the per-epoch log here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a trial list with a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Report path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-trial score dump.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Language-recognition probe on a checkpoint's embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate every mode over several seeds.
    Compare {
        /// Directory written by `synth`; a corpus is synthesized from the
        /// configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated subset of baseline,grl,cos,mapc,ours.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `text` or `csv`.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-run results.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, cfg } => commands::synth(&out, &cfg),
        Command::BuildTrials { metadata, out, split, cfg } => commands::build_trials(&metadata, &out, &split, &cfg),
        Command::ValidateTrials { metadata, trials, check_caps, cfg } => {
            commands::validate_trials(&metadata, &trials, check_caps, &cfg)
        }
        Command::Train { data, out, mode, lambda, epochs, log, cfg } => {
            commands::train(&data, &out, mode, lambda, epochs, log.as_deref(), &cfg)
        }
        Command::Evaluate { checkpoint, trials, features, out, scores, cfg } => {
            commands::evaluate(&checkpoint, &trials, &features, out.as_deref(), scores.as_deref(), &cfg)
        }
        Command::Probe { checkpoint, data, split, out, cfg } => commands::probe(&checkpoint, &data, &split, out.as_deref(), &cfg),
        Command::Compare { data, seeds, modes, epochs, format, out, runs, cfg } => commands::compare(
            data.as_deref(),
            commands::CompareFlags { seeds, modes, epochs, format },
            out.as_deref(),
            runs.as_deref(),
            &cfg,
        ),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_parse() { 2 } else { 1 })
        }
    }
}
