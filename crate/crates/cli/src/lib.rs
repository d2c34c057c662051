//! The `act` command-line driver: one pipeline stage per invocation.
//!
//! Exit status is 0 on success, 2 for configuration problems (invalid
//! config, missing inputs or checkpoints) and 1 for runtime failures.

pub mod commands;
pub mod config;
pub mod fixtures;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use act_core::trainer::TrainMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<act_core::Error> for CliError {
    fn from(e: act_core::Error) -> Self {
        if e.is_configuration() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "act", version, about = "Action-contrastive self-training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory of this stage.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the action-contrastive preference dataset.
    BuildPrefs {
        #[command(flatten)]
        common: Common,
        /// Read train/validation/test splits from a synth-ambigsql run.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Synthesize ambiguous text-to-SQL conversations.
    SynthAmbigsql {
        #[command(flatten)]
        common: Common,
    },
    /// Run the training loop on a preference dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// A build-prefs run directory.
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
    },
    /// Evaluate a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A train run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the final instead of the selected checkpoint.
        #[arg(long)]
        final_checkpoint: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Execution match with and without clarification turns.
    GapAnalysis {
        #[command(flatten)]
        common: Common,
        /// A synth-ambigsql run directory.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Compare evaluation runs.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Evaluation run directories, optionally as NAME=DIR.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<String>,
    },
    /// Write the bundled fixture corpora, scripts and configs.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.replace('-', "_").parse::<TrainMode>().map_err(|e| e.to_string())
}

/// Parses `argv` and runs the command; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("configuration error:\n{m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}
