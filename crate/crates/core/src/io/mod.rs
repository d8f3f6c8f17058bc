//! Files: dataset tables, screening libraries and checkpoints.

mod checkpoint;
mod dataset;

pub use checkpoint::{Checkpoint, CheckpointHeader, LogSummary, FORMAT_VERSION, MAGIC};
pub use dataset::{
    dataset_rows, ingest_csv, read_library, write_dataset_csv, IngestOptions, IngestReport, LibraryEntry, RowError,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("table layout: {0}")]
    Schema(String),
    #[error("feature schema mismatch: checkpoint has {found}, this build uses {expected}")]
    SchemaMismatch { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}
