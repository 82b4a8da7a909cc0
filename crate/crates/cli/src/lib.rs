//! Config-driven front-end for the `tlc_core` pipeline.
//!
//! Every subcommand reads one TOML run config, writes its artifacts under
//! `out_dir/{data,models,smd,opes,report}` and leaves a manifest recording
//! the config hash and the checksums of what it read and wrote.

pub mod commands;
pub mod config;
pub mod io;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad flags, or artifacts that do not match their manifest.
    Config(String),
    /// Divergence, degenerate fits, empty datasets.
    Numeric(String),
    /// Filesystem and serialization trouble.
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<tlc_core::Error> for CliError {
    fn from(e: tlc_core::Error) -> Self {
        use tlc_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::DimensionMismatch { .. } => CliError::Config(msg),
            E::SimulationDiverged { .. }
            | E::TrainingDiverged { .. }
            | E::GenerationDiverged { .. }
            | E::IllConditioned(_)
            | E::DegenerateEncoder(_)
            | E::DegenerateGeometry(_)
            | E::EmptyDataset(_) => CliError::Numeric(msg),
            E::Format(_) | E::Io(_) | E::Json(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tlc", version, about = "Time-lagged flow-matching CV pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted-key override, e.g. `model.tlc.lambda=0`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unbiased Langevin runs started in each basin.
    Simulate(CommonArgs),
    /// Time-lagged pair dataset from the simulated trajectories.
    MakePairs(CommonArgs),
    /// Train the configured CV learner.
    Train(CommonArgs),
    /// Refit the encoder calibration on the simulated frames.
    Calibrate(CommonArgs),
    /// Project the data and a landscape grid through the encoder.
    Project(CommonArgs),
    /// Steered MD, optionally swept over force constants.
    Smd(CommonArgs),
    /// OPES run along the configured CV.
    Opes(CommonArgs),
    /// Reweighted free-energy curve and the basin free-energy series.
    Fes(CommonArgs),
    /// Aggregate metrics across run directories.
    Report(CommonArgs),
}

/// Load the config named by `args` with overrides, `--seed` and `--out` applied.
pub fn load_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    let (args, stage) = match cmd {
        Command::Simulate(a) => (a, commands::Stage::Simulate),
        Command::MakePairs(a) => (a, commands::Stage::MakePairs),
        Command::Train(a) => (a, commands::Stage::Train),
        Command::Calibrate(a) => (a, commands::Stage::Calibrate),
        Command::Project(a) => (a, commands::Stage::Project),
        Command::Smd(a) => (a, commands::Stage::Smd),
        Command::Opes(a) => (a, commands::Stage::Opes),
        Command::Fes(a) => (a, commands::Stage::Fes),
        Command::Report(a) => (a, commands::Stage::Report),
    };
    let cfg = load_config(&args)?;
    commands::run_stage(stage, &cfg)
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tlc: {e}");
            e.exit_code()
        }
    }
}
