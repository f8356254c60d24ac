//! `clinli`: synthetic corpora, training, transfer chains, prediction,
//! evaluation and abbreviation expansion from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (reported
//! before any work starts), 1 for failures while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clinli::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "clinli", version, about = "Sentence-pair inference for clinical text")]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Transformer,
    Compaggr,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Transformer => ModelKind::Transformer,
            ModelArg::Compaggr => ModelKind::CompAggr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Mode {
    #[default]
    Pointwise,
    /// Assign the three labels exclusively within premise triples.
    Listwise,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus split 80/10/10 into train, dev and test files.
    Synth(commands::SynthArgs),
    /// Train one model from a run config.
    Train(commands::RunArgs),
    /// Train through a chain of stages from a run config.
    Transfer(commands::RunArgs),
    /// Write predictions for a dataset.
    Predict(commands::PredictArgs),
    /// Score predictions against gold labels.
    Eval(commands::EvalArgs),
    /// Expand abbreviations in a dataset.
    Expand(commands::ExpandArgs),
    /// Describe a checkpoint file.
    InspectCheckpoint { checkpoint: PathBuf },
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::run(a, config::RunKind::Train),
        Command::Transfer(a) => commands::run(a, config::RunKind::Transfer),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Expand(a) => commands::expand(a),
        Command::InspectCheckpoint { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
