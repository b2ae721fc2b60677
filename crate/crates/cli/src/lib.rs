//! Experiment driver: scenario sweeps, reference-table validation,
//! calibration, trace tooling, strategy planning and single-scenario runs.
//!
//! Every command writes plain CSV or JSON under the output directory and
//! returns an [`Outcome`] whose exit code is 0 on success and 1 when the
//! command found problems in its input data. Input errors map to exit code 2.

mod calibrate;
mod plan;
mod simulate;
mod sweep;
mod trace;
mod validate;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use sparsepool::cache::CacheError;
use sparsepool::calibration::CalibrationError;
use sparsepool::costmodel::{synthetic_profile, CostTable, CostTableError};
use sparsepool::pipeline::PipelineError;
use sparsepool::reference::ReferenceError;
use sparsepool::scenario::{Scenario, ScenarioError};
use sparsepool::trace::{TraceError, TraceFormatError};

pub use sweep::{expand_points, run_sweep, MtpSetting, SweepAxes, SweepSpec, TraceSource};

pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Parser)]
#[command(
    name = "sparsepool",
    version,
    about = "Offloaded sparse-attention decode simulator"
)]
pub struct Cli {
    /// Base scenario (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generated traces; overrides seeds in input files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Operator cost table (CSV); the shipped synthetic profile otherwise.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a grid of scenarios and emit reports and plot data.
    Sweep {
        /// Sweep specification (TOML).
        spec: PathBuf,
    },
    /// Check a results table for arithmetic and memory-model consistency.
    ValidateRef {
        /// Table CSV; the shipped table otherwise.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Fit the cost profile to reference rows.
    Calibrate(CalibrateArgs),
    /// Generate, inspect and convert access traces.
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Assign overlap strategies per layer from a miss profile.
    Plan {
        /// Miss profile CSV (per-step or per-layer summary).
        misses: PathBuf,
        /// Mean miss count at or above which a layer runs DBA.
        #[arg(long)]
        threshold: f64,
    },
    /// Simulate decode for the base scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Table CSV; the shipped table otherwise.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub fit_mtp: u32,
    #[arg(long, default_value_t = 32_768)]
    pub fit_context: u64,
    /// MTP settings predicted as held-out rows at the fit context.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub heldout_mtp: Vec<u32>,
    /// Predict no held-out rows.
    #[arg(long, conflicts_with = "heldout_mtp")]
    pub no_heldout: bool,
    /// Least-squares weight of ratio-1.0 rows.
    #[arg(long, default_value_t = 1.0)]
    pub anchor_weight: f64,
    /// Where to write the fitted cost table [default: <out>/calibrated_profile.csv].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Generate a synthetic trace.
    Gen(TraceGenArgs),
    /// Per-layer similarity summary of a trace.
    Stats { trace: PathBuf },
    /// Re-encode a trace in another format version.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 2)]
        to_version: u16,
    },
}

#[derive(Debug, Args)]
pub struct TraceGenArgs {
    /// Generator parameters (TOML); defaults otherwise.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub similarity: Option<f64>,
    #[arg(long)]
    pub layers: Option<u32>,
    #[arg(long)]
    pub context: Option<u64>,
    #[arg(long)]
    pub topk: Option<u32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub accept: Option<f64>,
    /// Trace file format version.
    #[arg(long, default_value_t = 1)]
    pub format_version: u16,
    /// Trace path [default: <out>/trace.bin].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Access trace; generated from the scenario otherwise.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Generator parameters used when no trace is given (TOML).
    #[arg(long, conflicts_with = "trace")]
    pub trace_params: Option<PathBuf>,
    /// Decode step exported as a span timeline.
    #[arg(long, default_value_t = 0)]
    pub timeline_step: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("sweep has {points} points, above the cap of {cap}")]
    TooManyPoints { points: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    CostTable(#[from] CostTableError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    TraceFormat(#[from] TraceFormatError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The input data has this many problems.
    Findings(usize),
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::Findings(_) => 1,
        }
    }
}

/// Exit code for a command that failed before producing a result.
pub const INPUT_ERROR_EXIT: u8 = 2;

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub profile: Option<PathBuf>,
}

impl Globals {
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        match &self.config {
            Some(p) => Ok(Scenario::load(p)?),
            None => Ok(Scenario::default()),
        }
    }

    pub fn costs(&self) -> Result<CostTable, CliError> {
        load_costs(self.profile.as_deref())
    }
}

pub fn load_costs(path: Option<&Path>) -> Result<CostTable, CliError> {
    match path {
        Some(p) => Ok(CostTable::load(p)?),
        None => Ok(synthetic_profile()),
    }
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        profile: cli.profile,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Argument("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build()?;
    pool.install(|| dispatch(&globals, cli.command))
}

fn dispatch(g: &Globals, command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Sweep { spec } => {
            let summary = run_sweep(g, &spec)?;
            println!(
                "sweep: {} points ({} feasible, {} infeasible) -> {}",
                summary.points,
                summary.feasible,
                summary.points - summary.feasible,
                summary.out_dir.display()
            );
            Ok(Outcome::Success)
        }
        Command::ValidateRef { table } => validate::run(g, table.as_deref()),
        Command::Calibrate(args) => calibrate::run(g, &args),
        Command::Trace(cmd) => trace::run(g, cmd),
        Command::Plan { misses, threshold } => plan::run(g, &misses, threshold),
        Command::Simulate(args) => simulate::run(g, &args),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_file(path: &Path) -> Result<fs::File, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
