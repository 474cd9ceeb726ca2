//! `swarm`: the train → collect → synthesize → retrain → evaluate pipeline.
//!
//! Every stage writes a run manifest next to its first output; `swarm replay`
//! re-runs a stage from that manifest and checks its outputs byte for byte.

mod args;
mod stages;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure of a CLI invocation, carrying its message category.
#[derive(Debug)]
pub enum CliError {
    Core(swarm_core::Error),
    /// A replayed stage produced different bytes.
    Mismatch(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Mismatch(m) => write!(f, "reproducibility mismatch: {m}"),
        }
    }
}

impl From<swarm_core::Error> for CliError {
    fn from(e: swarm_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use swarm_core::Error as E;
        match self {
            CliError::Core(E::MissingInput(_)) => 3,
            CliError::Core(E::Config(_)) => 4,
            CliError::Core(E::Dimension(_)) => 5,
            CliError::Core(E::Format(_) | E::Json(_) | E::Program(_)) => 6,
            CliError::Mismatch(_) => 7,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn config_err(m: impl Into<String>) -> CliError {
    CliError::Core(swarm_core::Error::Config(m.into()))
}

/// `SWARM_SEED` wins over `--seed`.
fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var("SWARM_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| config_err(format!("SWARM_SEED `{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(config_err(format!("SWARM_SEED: {e}"))),
    }
}

fn init_threads(n: Option<usize>) -> CliResult<()> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        if n == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        b = b.num_threads(n);
    }
    b.build_global().map_err(|e| config_err(format!("thread pool: {e}")))
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    if let Command::Replay { manifest } = &cli.command {
        let m = swarm_core::harness::RunManifest::read(manifest)?;
        init_threads(Some(m.threads))?;
        return stages::replay(&m);
    }
    init_threads(cli.threads)?;
    let seed = resolve_seed(cli.seed)?;
    let mut ctx = stages::Ctx::new(seed, cli.manifest.clone(), true);
    stages::dispatch(&mut ctx, cli.command, argv)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
