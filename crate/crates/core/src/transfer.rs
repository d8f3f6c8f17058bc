//! Fine-tuning a new target from a pretrained multi-task backbone.

use thiserror::Error;

use crate::data::{split_train_val, TaskDataset};
use crate::model::ModelParams;
use crate::rng::SeedKey;
use crate::train::{fit, init_params, EpochObserver, TrainConfig, TrainError, TrainOutcome};

/// Epochs of head-only training before the whole network is unfrozen.
pub const WARMUP_EPOCHS: usize = 20;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("new-target dataset must have exactly one task, got {0}")]
    TaskCount(usize),
    #[error("pretrained backbone is {got_dim}x{got_layers} (dim x layers), config asks for {dim}x{layers}")]
    Dimension {
        dim: usize,
        layers: usize,
        got_dim: usize,
        got_layers: usize,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Copy the backbone of `pretrained` into a model with a fresh head, train
/// the head alone for [`WARMUP_EPOCHS`] epochs, then everything under the
/// usual stopping rule. Epoch numbers run on across both phases.
pub fn transfer_train(
    pretrained: &ModelParams,
    new_ds: &TaskDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TransferError> {
    transfer_train_with(pretrained, new_ds, config, WARMUP_EPOCHS, None)
}

pub fn transfer_train_with(
    pretrained: &ModelParams,
    new_ds: &TaskDataset,
    config: &TrainConfig,
    warmup_epochs: usize,
    observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TransferError> {
    if new_ds.num_tasks() != 1 {
        return Err(TransferError::TaskCount(new_ds.num_tasks()));
    }
    let pc = &pretrained.config;
    if pc.dim != config.dim || pc.layers != config.layers {
        return Err(TransferError::Dimension {
            dim: config.dim,
            layers: config.layers,
            got_dim: pc.dim,
            got_layers: pc.layers,
        });
    }
    config.validate()?;
    let (train, val) = split_train_val(new_ds, config.val_fraction, config.seed).map_err(TrainError::from)?;
    let mut params = init_params(config, 1, &train);
    params.copy_backbone_from(pretrained).map_err(TrainError::from)?;
    Ok(fit(
        params,
        &train,
        &val,
        config,
        SeedKey::new(config.seed).named("fit"),
        warmup_epochs,
        observer,
    )?)
}
