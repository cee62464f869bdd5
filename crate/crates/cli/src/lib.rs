//! Command-line runner for training, sweeps, ablations, spectral analysis
//! and report export. See `docs/formats.md` for every file it writes.

pub mod commands;
pub mod config;
pub mod rows;
pub mod runs;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Exit status 2: bad flags, config or input files.
pub const EXIT_USAGE: u8 = 2;
/// Exit status 3: training diverged or a decomposition failed.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Numeric(_) => EXIT_NUMERIC,
            Self::Other(_) => 1,
        }
    }
}

impl From<lorasp::Error> for CliError {
    fn from(e: lorasp::Error) -> Self {
        use lorasp::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite { .. } | E::SvdNoConvergence { .. } => Self::Numeric(e.to_string()),
            E::Config(_) | E::RankOutOfRange { .. } | E::Empty(_) | E::Format { .. } | E::Json(_) => {
                Self::Usage(e.to_string())
            }
            _ => Self::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lorasp", version, about = "Train and analyse energy-gated low-rank adapters")]
pub struct Cli {
    /// Output root; runs land in <out>/<experiment name>/<config hash>/.
    #[arg(long, global = true, env = "LORASP_RUNS", default_value = "runs")]
    pub out: PathBuf,
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse finished runs found in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one adapter on the task suite.
    Train(RunArgs),
    /// Fixed-rank LoRA sweep, single- and multi-task, with intrinsic dimensions.
    Sweep(RunArgs),
    /// LoRA-SP with and without the spectral loss, or over the η grid.
    Ablate(RunArgs),
    /// Rank needed to reach each energy target, per layer of an update bundle.
    Analyze {
        /// Checkpoint or updates bundle written by `train`.
        input: PathBuf,
        /// Comma-separated energy targets in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.99")]
        etas: Vec<f64>,
    },
    /// Aggregate finished run directories into comparison tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Runs a parsed command line, returning the directory it wrote.
pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let ctx = runs::Context {
        root: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Train(a) => commands::train(&ctx, &a.into()),
        Command::Sweep(a) => commands::sweep(&ctx, &a.into()),
        Command::Ablate(a) => commands::ablate(&ctx, &a.into()),
        Command::Analyze { input, etas } => commands::analyze(&ctx, &input, &etas),
        Command::Report { runs } => commands::report(&ctx, &runs),
    }
}

impl From<RunArgs> for commands::RunOptions {
    fn from(a: RunArgs) -> Self {
        Self {
            config: a.config,
            seed: a.seed,
            resume: a.resume,
            jobs: a.jobs as usize,
        }
    }
}
