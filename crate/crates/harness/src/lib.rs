//! Command-line harness: experiment configs, multi-seed orchestration and
//! CSV/JSON output.

pub mod config;
pub mod experiments;
pub mod output;
pub mod stats;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{BoundKind, ExperimentConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gradnoise_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output error: {0}")]
    Output(String),
    #[error("diverged: {0}")]
    Diverged(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for configuration problems, 3 for numerical failures and divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Output(_) => 2,
            HarnessError::Core(e) if e.is_config() => 2,
            HarnessError::Core(_) | HarnessError::Diverged(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gradnoise", version, about = "SGD gradient-noise experiments and generalization bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: GRADNOISE_JOBS, else available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One training run; writes trajectory.csv.
    Train(Common),
    /// Paired SGD and SDE runs over several seeds.
    Compare(Common),
    /// Trajectory bounds on an ensemble.
    BoundsTraj(Common),
    /// Terminal-state bounds on an ensemble.
    BoundsTerminal(Common),
    /// Solved vs empirical stationary covariance.
    Stationary(Common),
    /// Bounds and generalization error across training-set sizes.
    SweepN(Common),
}

fn jobs(flag: Option<usize>) -> Result<Option<usize>, HarnessError> {
    if let Some(j) = flag {
        return Ok(Some(j));
    }
    match std::env::var("GRADNOISE_JOBS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| HarnessError::Config(format!("GRADNOISE_JOBS must be a non-negative integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    let (common, run): (Common, fn(&ExperimentConfig) -> Result<(), HarnessError>) = match command {
        Command::Train(c) => (c, experiments::cmd_train),
        Command::Compare(c) => (c, experiments::cmd_compare),
        Command::BoundsTraj(c) => (c, experiments::cmd_bounds_traj),
        Command::BoundsTerminal(c) => (c, experiments::cmd_bounds_terminal),
        Command::Stationary(c) => (c, experiments::cmd_stationary),
        Command::SweepN(c) => (c, experiments::cmd_sweep_n),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = common.out {
        cfg.out = o;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs(common.jobs)? {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(&cfg))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
