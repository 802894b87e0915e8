mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::output::CliError;

#[derive(Parser, Debug)]
#[command(name = "di4c-lab", version, about = "Exact small-scale discrete diffusion and mixture distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    /// Convergence of analytical sampling as the step count grows.
    Converge,
    /// Train a mixture student from a product teacher.
    Distill,
    /// Bound, closed-form and inequality checks.
    Verify,
    /// Draw samples or emit the exact output law.
    Sample,
}

#[derive(Subcommand, Debug)]
enum Command {
    Converge(Args),
    Distill(Args),
    Verify(Args),
    Sample(Args),
}

#[derive(clap::Args, Debug, Clone)]
pub struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the summary as JSON on stdout.
    #[arg(long)]
    pub json: bool,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("DI4C_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DI4C_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Converge(a) => (CommandKind::Converge, a),
        Command::Distill(a) => (CommandKind::Distill, a),
        Command::Verify(a) => (CommandKind::Verify, a),
        Command::Sample(a) => (CommandKind::Sample, a),
    };
    let result = configure_threads().and_then(|()| commands::run(kind, &args));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("di4c-lab: {e}");
            ExitCode::from(e.code())
        }
    }
}
