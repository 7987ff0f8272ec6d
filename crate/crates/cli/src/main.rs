//! `bshc`: simulate scenes, optimize trajectories and run verification suites.
//!
//! Exit codes: 0 success, 1 verification or simulation failure, 2 usage or
//! configuration error.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use bsh_contact::contact::Backend;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bshc", version, about = "Barrier contact simulation, trajectory optimization and verification")]
struct Cli {
    /// Worker threads for parallel maps (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Step a scene over its horizon and write one CSV row per frame.
    Simulate(SimulateArgs),
    /// Optimize the scene's task with Adam.
    Optimize(OptimizeArgs),
    /// Run a verification suite and write report.csv.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Scene TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Override the contact backend from the config.
    #[arg(long)]
    backend: Option<Backend>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write 0 in timing columns so outputs are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the optimizer iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Properties,
    Complexity,
    IpcDemo,
    TrajoptAb,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    suite: Suite,
    /// Output directory (created if missing).
    #[arg(long, default_value = "verify-out")]
    out: PathBuf,
    #[arg(long, default_value_t = commands::DEFAULT_SEED)]
    seed: u64,
    /// Reduced sample counts for smoke runs; thresholds are unchanged.
    #[arg(long)]
    quick: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// A check failed or the simulation could not proceed (exit 1).
    Failed(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Failed(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = bsh_contact::par::init_threads(cli.threads) {
        eprintln!("error: --threads: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a.common.into(), &a.out),
        Command::Optimize(a) => commands::optimize(&a.common.into(), &a.out, a.iterations),
        Command::Verify(a) => commands::verify(a.suite, &a.out, a.seed, a.quick),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Failed(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

impl From<Common> for commands::RunOptions {
    fn from(c: Common) -> Self {
        commands::RunOptions { config: c.config, backend: c.backend, seed: c.seed, timing: !c.no_timing }
    }
}
