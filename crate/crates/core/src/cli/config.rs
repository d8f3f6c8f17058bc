use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::active::AlConfig;
use crate::train::TrainConfig;

/// Contents of a `--config` JSON file. Missing fields keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Seed for every subcommand; overrides the section seeds.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub active_learning: AlConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: FileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.active_learning.seed = seed;
        }
        Ok(cfg)
    }
}

/// Training flags; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Hidden width d.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of GIN layers K.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub min_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(seed, lr, batch_size, dropout, dim, layers, head_hidden, val_fraction, min_epochs, patience, max_epochs);
        c
    }
}
