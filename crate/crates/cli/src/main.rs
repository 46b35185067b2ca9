//! `gpp`: phantom generation, preprocessing, training, detection,
//! evaluation and ranking from the command line.

mod commands;
mod config;
mod dataset;
mod manifest;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{DetectArgs, EvalArgs, PhantomArgs, PrepArgs, RankArgs, RunConfig, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "gpp", version, about = "Growth-plate plane detection pipeline")]
struct Cli {
    /// TOML run configuration. Values in it take precedence over flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded set of synthetic volumes and `truth.csv`.
    Phantom(PhantomArgs),
    /// Clip and resize volumes into a new data directory.
    Prep(PrepArgs),
    /// Train one method, optionally one model per cross-validation fold.
    Train(TrainArgs),
    /// Predict the growth-plate plane of every volume in a directory.
    Detect(DetectArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Rank methods from one or more summary files.
    Rank(RankArgs),
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Internal(String),
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Failure::Input(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Internal(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<gpp_core::Error> for Failure {
    fn from(e: gpp_core::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom(a) => commands::phantom(&cfg, a),
        Command::Prep(a) => commands::prep(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Detect(a) => commands::detect(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Rank(a) => commands::rank(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gpp: {f}");
            ExitCode::from(f.code())
        }
    }
}
