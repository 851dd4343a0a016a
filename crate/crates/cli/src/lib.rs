//! Command-line driver: `train`, `eval`, `ablate`, `gradcheck`, `gen-synth`.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use mifuse_core::{Error, ErrorKind};

pub mod commands;
pub mod config;
pub mod table;

pub use config::{Overrides, RunConfig};

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Verification = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Data, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code_for(kind: ErrorKind) -> ExitCode {
    match kind {
        ErrorKind::Config => ExitCode::Config,
        ErrorKind::Data => ExitCode::Data,
        ErrorKind::Numeric => ExitCode::Numeric,
        ErrorKind::Checkpoint => ExitCode::Checkpoint,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(exit_code_for(e.kind()), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mifuse",
    version,
    about = "Audio-text fusion with MI regularisation on precomputed embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Pooling,
    Fusion,
    Lambda,
    LayersMeta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Pooling => "pooling",
            Axis::Fusion => "fusion",
            Axis::Lambda => "lambda",
            Axis::LayersMeta => "layers-meta",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train `runs` seeds and write report.json, config.json and run_<r>.mmck.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the five metrics of a checkpoint on one split as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run index for the validation split; defaults to the `run_<r>` file name.
        #[arg(long)]
        run: Option<usize>,
    },
    /// Repeat training over the variants of one axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One manifest, or one per extractor variant for `layers-meta`.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference check of every op group and the composed model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the listing as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic two-class dataset and print its manifest path.
    GenSynth {
        /// Utterances per class.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        d_t: usize,
        #[arg(long, default_value_t = 16)]
        d_a: usize,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
    },
}

/// Runs `cli`, writing results to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            data,
            out: dir,
            overrides,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides, data, dir)?;
            commands::train(&cfg, out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            run,
        } => commands::eval(&checkpoint, &data, split, config.as_deref(), run, out),
        Command::Ablate {
            axis,
            config,
            data,
            out: dir,
            overrides,
        } => {
            let first = data.first().cloned();
            let cfg = RunConfig::load(config.as_deref(), &overrides, first, dir)?;
            let manifests = if data.is_empty() {
                vec![cfg.data_path()?.to_path_buf()]
            } else {
                data
            };
            commands::ablate(&cfg, axis, &manifests, out)
        }
        Command::Gradcheck { seed, json } => commands::gradcheck(seed, json, out),
        Command::GenSynth {
            n,
            sep,
            seed,
            out: dir,
            d_t,
            d_a,
            test_fraction,
        } => {
            let cfg = mifuse_core::data::SynthConfig {
                n_per_class: n,
                d_t,
                d_a,
                separation: sep,
                seed,
                test_fraction,
                ..Default::default()
            };
            commands::gen_synth(&cfg, &dir, out)
        }
    }
}
