mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configs or input files. Exit code 1.
    Validation(String),
    /// NaN/Inf, division hazards or a failed gradient check. Exit code 2.
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<ifrnet::Error> for CliError {
    fn from(e: ifrnet::Error) -> Self {
        match e {
            ifrnet::Error::NonFinite { .. } | ifrnet::Error::DivisionHazard(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "ifrnet", version, about = "Unrolled feature-refinement reconstruction for undersampled MRI")]
pub struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; receives the resolved config.toml.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Rounds loaded data and parameters to f32 before computing.
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a k-space sampling mask.
    Mask(commands::MaskArgs),
    /// Undersample an image with a mask.
    Simulate(commands::SimulateArgs),
    /// Train a network on simulated pairs.
    Train(commands::TrainArgs),
    /// Reconstruct a pair with a trained checkpoint.
    Reconstruct(commands::ReconstructArgs),
    /// Compare a reconstruction with its ground truth.
    Eval(commands::EvalArgs),
    /// Compare analytic gradients against finite differences on a small net.
    Gradcheck(commands::GradcheckArgs),
    /// Run the classical iterative solver.
    Baseline(commands::BaselineArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let ctx = commands::Context {
        cfg,
        out: cli.out,
        precision: cli.precision,
    };
    ctx.echo_config()?;
    match cli.command {
        Command::Mask(a) => commands::mask(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Reconstruct(a) => commands::reconstruct(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Baseline(a) => commands::baseline(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Validation(_) => ExitCode::from(1),
                CliError::Numerical(_) => ExitCode::from(2),
            }
        }
    }
}
