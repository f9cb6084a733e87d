//! `labelshift` command-line tool.

mod eval;
mod generate;
mod report;
mod run;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use labelshift::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "labelshift", version, about = "Label-shift-aware self-training experiments on simulated cohorts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Global {
    /// Experiment seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort file.
    Generate(generate::GenerateArgs),
    /// Run the adaptation experiment.
    Run(run::RunArgs),
    /// Score detections against a cohort.
    Eval(eval::EvalArgs),
    /// Plot a round log.
    Report(report::ReportArgs),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Everything else; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::ResumeMismatch { .. }
            | Error::InvalidBinning(_)
            | Error::InvalidSpacing(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl Global {
    /// The config file (or defaults) with the seed override applied.
    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
                Error::Io(io) => CliError::Usage(format!("{}: {io}", p.display())),
                other => other.into(),
            })?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn out_required(&self) -> CliResult<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(&cli.global, &a),
        Command::Run(a) => run::run(&cli.global, &a),
        Command::Eval(a) => eval::run(&cli.global, &a),
        Command::Report(a) => report::run(&cli.global, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
