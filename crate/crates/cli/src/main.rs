//! `mrcal`: synthesize, fuse, train, evaluate and compare.
//!
//! stdout carries JSON only; diagnostics go to stderr.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, FuseArgs, ReportArgs, SweepArgs, SynthArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "mrcal", version, about = "Multi-rater calibrated segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-rater dataset.
    Synth(SynthArgs),
    /// Fuse rater masks into training targets.
    Fuse(FuseArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Evaluate a model (or the synthetic oracle) on one split.
    Eval(EvalArgs),
    /// Train and validate one model per value of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Summarize several evaluation reports.
    Report(ReportArgs),
}

/// Exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: IO or data problems.
    Data(String),
    /// Exit 2: bad flags or values.
    Usage(String),
    /// Exit 3: training diverged.
    Numerical(String),
    /// Exit 4: a metric is undefined; whatever could be computed was written.
    Undefined(String),
}

impl From<mrcal::Error> for Failure {
    fn from(e: mrcal::Error) -> Self {
        match e {
            mrcal::Error::NonFiniteLoss { .. } => Failure::Numerical(e.to_string()),
            mrcal::Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MRCAL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("MRCAL_THREADS must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Data(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Data(m) => (1, m),
                Failure::Usage(m) => (2, m),
                Failure::Numerical(m) => (3, m),
                Failure::Undefined(m) => (4, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
