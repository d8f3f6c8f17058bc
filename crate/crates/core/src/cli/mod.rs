//! Command-line front end. `run` parses arguments, dispatches, and maps
//! failures to exit codes with a JSON error report on stderr.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

pub use config::{FileConfig, TrainArgs};

/// Environment variable with the worker-thread count.
pub const WORKERS_ENV: &str = "DOCKMTL_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Training(_) => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Schema(_) => "schema_mismatch",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Training(_) => "training",
        }
    }
}

impl From<crate::io::IoError> for CliError {
    fn from(e: crate::io::IoError) -> Self {
        use crate::io::IoError as E;
        match e {
            E::Io(_) => CliError::Io(e.to_string()),
            E::Csv(ref c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e.to_string()),
            E::SchemaMismatch { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        use crate::train::TrainError as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<crate::active::AlError> for CliError {
    fn from(e: crate::active::AlError) -> Self {
        use crate::active::AlError as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Train(t) => t.into(),
            E::PoolExhausted { .. } | E::Oracle { .. } | E::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<crate::transfer::TransferError> for CliError {
    fn from(e: crate::transfer::TransferError) -> Self {
        use crate::transfer::TransferError as E;
        match e {
            E::Train(t) => t.into(),
            E::Dimension { .. } => CliError::Config(e.to_string()),
            E::TaskCount(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::metrics::MetricError> for CliError {
    fn from(e: crate::metrics::MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::synth::SynthError> for CliError {
    fn from(e: crate::synth::SynthError) -> Self {
        use crate::synth::SynthError as E;
        match e {
            E::TooFewTasks(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dockmtl", version, about = "Multi-task GNN surrogates for docking-based virtual screening")]
pub struct Cli {
    /// JSON config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Single,
    Mtl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AcquisitionArg {
    Greedy,
    Ucb,
}

#[derive(Debug, Args)]
pub struct DirectionArgs {
    /// Hit direction of a task, as `TASK=lower` or `TASK=higher`.
    #[arg(long = "direction", value_name = "TASK=DIR")]
    pub directions: Vec<String>,
    /// Direction for plain task columns without an explicit `--direction`.
    #[arg(long, default_value = "lower")]
    pub default_direction: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and merge a labelled CSV, reporting rejected rows.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Cleaned table (merged duplicates, IC50 converted to pChEMBL).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of rejected rows with line numbers.
        #[arg(long)]
        errors: Option<PathBuf>,
        #[command(flatten)]
        directions: DirectionArgs,
    },
    /// Train a single-task or multi-task model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mtl")]
        mode: TrainMode,
        /// Task to model as the new target.
        #[arg(long)]
        new_target: String,
        /// Labels of the new target to sample (default: all).
        #[arg(long)]
        new_size: Option<usize>,
        /// Labels to sample per auxiliary task (default: all).
        #[arg(long)]
        aux_size: Option<usize>,
        /// Auxiliary tasks, comma separated (default: every other task).
        #[arg(long, value_delimiter = ',')]
        aux_tasks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        directions: DirectionArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Active learning on one task, using its labels as the oracle.
    ActiveLearn {
        /// Pool CSV; the target column plays the docking oracle.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        init_fraction: Option<f64>,
        #[arg(long)]
        ensemble_size: Option<usize>,
        #[arg(long, value_enum)]
        acquisition: Option<AcquisitionArg>,
        /// Exploration weight for `ucb`.
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Round log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Acquired compounds with their labels (CSV).
        #[arg(long)]
        labeled_out: Option<PathBuf>,
        #[command(flatten)]
        directions: DirectionArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune a new target from a multi-task checkpoint.
    Transfer {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        new_size: Option<usize>,
        /// Head-only epochs before full fine-tuning.
        #[arg(long, default_value_t = crate::transfer::WARMUP_EPOCHS)]
        warmup: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        directions: DirectionArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predict every task of a checkpoint for a compound list.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a library for one task and flag predicted hits.
    Screen {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Task to rank by (default: the checkpoint's first task).
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0.02)]
        top_frac: f64,
        /// Emit the whole ranking instead of the top fraction.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a labelled test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// True-hit counts for recall.
        #[arg(long = "k", value_delimiter = ',')]
        k: Vec<usize>,
        /// Predicted-hit fractions for recall.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.02, 0.03, 0.05])]
        top_frac: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        directions: DirectionArgs,
    },
    /// Write graph embeddings for a compound list.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ensemble member whose backbone to use.
        #[arg(long, default_value_t = 0)]
        member: usize,
    },
    /// Train and evaluate over a grid of new-target and auxiliary sizes.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Labelled test set for the new target.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        new_target: String,
        #[arg(long, value_delimiter = ',', required = true)]
        new_sizes: Vec<usize>,
        /// Labels per auxiliary task; 0 trains the new target alone.
        #[arg(long, value_delimiter = ',', required = true)]
        aux_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        aux_tasks: Vec<String>,
        /// True-hit count for recall (default: the predicted-hit count).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        top_frac: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        directions: DirectionArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate a synthetic task family.
    SynthGen {
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 1000)]
        compounds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Same coefficients (a = 1, b = 0) for every task.
        #[arg(long)]
        identical: bool,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth coefficients (JSON).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Hold out this many compounds into `--test-out`.
        #[arg(long, default_value_t = 0)]
        test_size: usize,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
}

fn configure_workers() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool may already exist when the CLI is driven in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Run the CLI and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Config(e.to_string());
            report(&err);
            return err.exit_code();
        }
    };
    let result = configure_workers().and_then(|_| commands::dispatch(cli));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn report(e: &CliError) {
    let body = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    eprintln!("{body}");
}
