//! Masked multi-task training with the overfitting-streak stopping rule.

mod early_stop;

pub use early_stop::{simulate as simulate_early_stopping, EarlyStopping, Observation, StopReason};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_train_val, DataError, TaskDataset};
use crate::featurize::FeaturizedGraph;
use crate::model::{forward, predict, GradScope, GraphBatch, Mode, ModelConfig, ModelError, ModelParams};
use crate::rng::SeedKey;
use crate::tensor::{AdamState, Tape, Tensor, TensorError, BATCH_NORM_MOMENTUM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}{}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    NonFinite {
        what: String,
        epoch: usize,
        batch: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub dim: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub val_fraction: f64,
    pub min_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            dropout: 0.2,
            dim: 256,
            layers: 8,
            head_hidden: 256,
            val_fraction: 0.2,
            min_epochs: 100,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie strictly between 0 and 1");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.dim == 0 || self.head_hidden == 0 {
            return bad("dim and head_hidden must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub heads_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Masked mean squared error over plain tensors; `mask` is row-major like
/// `pred`. Errors when no entry is labelled.
pub fn masked_loss(pred: &Tensor, labels: &Tensor, mask: &[bool]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let loss = tape
        .masked_mse(p, labels, mask)?
        .ok_or_else(|| TrainError::Config("batch has no labelled pairs".into()))?;
    Ok(tape.value(loss).item()?)
}

struct LabelledBatch {
    graphs: GraphBatch,
    labels: Tensor,
    mask: Vec<bool>,
}

fn labelled_batch(ds: &TaskDataset, indices: &[usize]) -> Result<LabelledBatch, TrainError> {
    let graphs: Vec<&FeaturizedGraph> = indices.iter().map(|&i| &ds.compound(i).graph).collect();
    let t = ds.num_tasks();
    let mut values = Vec::with_capacity(indices.len() * t);
    let mut mask = Vec::with_capacity(indices.len() * t);
    for &i in indices {
        let (v, m) = ds.label_row(i);
        values.extend_from_slice(v);
        mask.extend_from_slice(m);
    }
    Ok(LabelledBatch {
        graphs: GraphBatch::new(&graphs)?,
        labels: Tensor::new(indices.len(), t, values)?,
        mask,
    })
}

/// Consecutive chunks of `order`. A trailing chunk with fewer than two atoms
/// in total is merged into the previous one, since batch normalisation needs
/// at least two rows.
pub fn chunk_batches(ds: &TaskDataset, order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 {
        let last = chunks.last().unwrap();
        let atoms: usize = last.iter().map(|&i| ds.compound(i).graph.num_atoms()).sum();
        if atoms < 2 {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
    }
    chunks
}

fn fixed_batches(ds: &TaskDataset, batch_size: usize) -> Result<Vec<LabelledBatch>, TrainError> {
    let order: Vec<usize> = (0..ds.len()).collect();
    chunk_batches(ds, &order, batch_size)
        .iter()
        .map(|c| labelled_batch(ds, c))
        .collect()
}

fn mean_eval_loss(params: &ModelParams, batches: &[LabelledBatch], tasks: &[usize]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for b in batches {
        let pred = predict(params, &b.graphs, tasks)?;
        total += masked_loss(&pred, &b.labels, &b.mask)?;
    }
    Ok(total / batches.len() as f64)
}

/// Eval-mode masked MSE of `params` on `ds`, averaged over batches.
pub fn dataset_loss(params: &ModelParams, ds: &TaskDataset, batch_size: usize) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    let tasks: Vec<usize> = (0..ds.num_tasks()).collect();
    mean_eval_loss(params, &fixed_batches(ds, batch_size)?, &tasks)
}

/// Sets every head's output bias to the mean training label of its task.
pub fn init_head_biases(params: &mut ModelParams, train: &TaskDataset) {
    for (head, mean) in params.heads.iter_mut().zip(train.task_means()) {
        if let Some(m) = mean {
            head.b2 = Tensor::scalar(m);
        }
    }
}

/// Per-epoch callback, invoked after the epoch's losses are known.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRecord, &ModelParams);

/// Training loop shared by every regime. The first `heads_only_epochs`
/// epochs update head parameters only, with batch-norm running statistics
/// held fixed; a fresh optimizer then takes over all parameters.
pub(crate) fn fit(
    mut params: ModelParams,
    train: &TaskDataset,
    val: &TaskDataset,
    config: &TrainConfig,
    key: SeedKey,
    heads_only_epochs: usize,
    observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Empty.into());
    }
    let tasks: Vec<usize> = (0..train.num_tasks()).collect();
    let train_eval = fixed_batches(train, config.batch_size)?;
    let val_eval = fixed_batches(val, config.batch_size)?;
    let mut stopper = EarlyStopping::new(config.min_epochs, config.patience, config.max_epochs);
    let mut observer = observer;
    let mut adam = AdamState::new(params.trainable(), config.lr);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let heads_only = epoch <= heads_only_epochs;
        if epoch == heads_only_epochs + 1 && heads_only_epochs > 0 {
            adam = AdamState::new(params.trainable(), config.lr);
        }
        let scope = if heads_only { GradScope::HeadsOnly } else { GradScope::All };
        order.shuffle(&mut key.named("shuffle").split(epoch as u64).rng());
        for (bi, chunk) in chunk_batches(train, &order, config.batch_size).iter().enumerate() {
            let batch = labelled_batch(train, chunk)?;
            let mode = Mode::Train {
                key: key.named("dropout").split(epoch as u64).split(bi as u64),
            };
            let mut tape = Tape::new();
            let out = forward(&mut tape, &params, &batch.graphs, &tasks, mode, scope)?;
            let loss = tape
                .masked_mse(out.predictions, &batch.labels, &batch.mask)?
                .ok_or_else(|| TrainError::Config("batch has no labelled pairs".into()))?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("training loss ({loss_value})"),
                    epoch,
                    batch: Some(bi),
                });
            }
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<Option<&Tensor>> = out.param_vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut params.trainable_mut(), &grad_refs).map_err(|e| match e {
                TensorError::NonFinite { what } => TrainError::NonFinite {
                    what,
                    epoch,
                    batch: Some(bi),
                },
                other => other.into(),
            })?;
            if !heads_only {
                for (layer, stats) in params.layers.iter_mut().zip(&out.bn_stats) {
                    layer.running.update(stats, BATCH_NORM_MOMENTUM);
                }
            }
        }

        let train_loss = mean_eval_loss(&params, &train_eval, &tasks)?;
        let val_loss = mean_eval_loss(&params, &val_eval, &tasks)?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(TrainError::NonFinite {
                what: format!("epoch losses (train {train_loss}, val {val_loss})"),
                epoch,
                batch: None,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            heads_only,
        };
        let obs = stopper.observe(epoch, train_loss, val_loss);
        if obs.improved {
            best = params.clone();
        }
        if let Some(f) = observer.as_mut() {
            f(&record, &params);
        }
        epochs.push(record);
        if let Some(reason) = obs.stop {
            let log = TrainLog {
                epochs,
                best_epoch: stopper.best_epoch().unwrap_or(epoch),
                best_val_loss: stopper.best_val_loss().unwrap_or(val_loss),
                stop_epoch: epoch,
                stop_reason: reason,
            };
            return Ok(TrainOutcome { params: best, log });
        }
    }
    unreachable!("max_epochs always fires a stop")
}

/// Fresh parameters for `ds`, with head biases set from `train`.
pub fn init_params(config: &TrainConfig, num_tasks: usize, train: &TaskDataset) -> ModelParams {
    let mut params = ModelParams::init(config.model_config(), num_tasks, SeedKey::new(config.seed).named("init"));
    init_head_biases(&mut params, train);
    params
}

/// Train on every task of `ds` jointly. Returns the parameters of the epoch
/// with the lowest validation loss.
pub fn train(ds: &TaskDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_observed(ds, config, None)
}

pub fn train_observed(
    ds: &TaskDataset,
    config: &TrainConfig,
    observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (train_ds, val_ds) = split_train_val(ds, config.val_fraction, config.seed)?;
    let params = init_params(config, ds.num_tasks(), &train_ds);
    fit(params, &train_ds, &val_ds, config, SeedKey::new(config.seed).named("fit"), 0, observer)
}

/// Train a one-head model on `task` alone.
pub fn train_single_task(ds: &TaskDataset, task: usize, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train(&ds.select_tasks(&[task])?, config)
}

/// Batched eval-mode predictions for arbitrary graphs, `n × |tasks|`.
pub fn predict_graphs(
    params: &ModelParams,
    graphs: &[&FeaturizedGraph],
    tasks: &[usize],
    batch_size: usize,
) -> Result<Tensor, ModelError> {
    use rayon::prelude::*;
    let parts: Vec<Tensor> = graphs
        .par_chunks(batch_size.max(1))
        .map(|chunk| predict(params, &GraphBatch::new(chunk)?, tasks))
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(graphs.len() * tasks.len());
    for p in parts {
        data.extend(p.into_data());
    }
    Ok(Tensor::new(graphs.len(), tasks.len(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Compound, HitDirection};
    use crate::featurize::featurize_smiles;

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            dim: 8,
            layers: 2,
            head_hidden: 8,
            batch_size: 8,
            min_epochs: 3,
            patience: 2,
            max_epochs: 6,
            dropout: 0.1,
            seed,
            ..TrainConfig::default()
        }
    }

    fn chain_dataset(tasks: usize, labelled: impl Fn(usize, usize) -> bool) -> TaskDataset {
        let compounds: Vec<Compound> = (1..=24)
            .map(|n| {
                let smiles = "C".repeat(n % 8 + 1) + &"O".repeat(n % 3);
                Compound {
                    graph: featurize_smiles(&smiles).unwrap(),
                    smiles,
                }
            })
            .collect();
        let labels = (0..compounds.len())
            .map(|i| {
                let atoms = compounds[i].graph.num_atoms() as f64;
                (0..tasks)
                    .map(|t| labelled(i, t).then_some(atoms * (t as f64 + 1.0) * 0.1))
                    .collect()
            })
            .collect();
        TaskDataset::new(
            compounds,
            (0..tasks).map(|t| format!("T{t}")).collect(),
            vec![HitDirection::LowerIsBetter; tasks],
            labels,
        )
        .unwrap()
    }

    #[test]
    fn masked_loss_examples() {
        let pred = Tensor::new(1, 2, vec![0.0, 5.0]).unwrap();
        let labels = Tensor::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(masked_loss(&pred, &labels, &[true, false]).unwrap(), 1.0);
        assert_eq!(masked_loss(&labels, &labels, &[true, true]).unwrap(), 0.0);
        let pred = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let labels = Tensor::new(2, 2, vec![0.0, 1.0, 4.0, 5.0]).unwrap();
        assert_eq!(masked_loss(&pred, &labels, &[true; 4]).unwrap(), 1.0);
        assert!(masked_loss(&pred, &labels, &[false; 4]).is_err());
    }

    #[test]
    fn unlabelled_predictions_get_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let labels = Tensor::zeros(2, 2);
        let loss = tape.masked_mse(p, &labels, &[true, false, false, true]).unwrap().unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(p).unwrap().data().to_vec();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[0] != 0.0 && g[3] != 0.0);
    }

    #[test]
    fn log_has_one_record_per_epoch_and_is_reproducible() {
        let ds = chain_dataset(2, |i, t| t == 0 || i % 2 == 0);
        let a = train(&ds, &tiny_config(4)).unwrap();
        assert_eq!(a.log.epochs.len(), a.log.stop_epoch);
        for (i, r) in a.log.epochs.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
        }
        let b = train(&ds, &tiny_config(4)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn best_epoch_has_minimal_val_loss() {
        let ds = chain_dataset(1, |_, _| true);
        let out = train(&ds, &tiny_config(2)).unwrap();
        let min = out.log.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.log.best_val_loss, min);
        let first = out.log.epochs.iter().find(|r| r.val_loss == min).unwrap().epoch;
        assert_eq!(out.log.best_epoch, first);
    }

    #[test]
    fn single_task_matches_train_on_one_task() {
        let ds = chain_dataset(2, |i, t| t == 0 || i < 10);
        let cfg = tiny_config(7);
        let single = train_single_task(&ds, 0, &cfg).unwrap();
        let direct = train(&ds.select_tasks(&[0]).unwrap(), &cfg).unwrap();
        assert_eq!(single.params, direct.params);
        assert_eq!(single.log, direct.log);
        assert_eq!(single.params.num_tasks(), 1);
        let mtl = train(&ds, &cfg).unwrap();
        assert_ne!(mtl.params.node_tables, single.params.node_tables);
    }

    #[test]
    fn trailing_single_atom_batch_is_merged() {
        let ds = chain_dataset(1, |_, _| true);
        let methane = (0..ds.len()).find(|&i| ds.compound(i).graph.num_atoms() == 1);
        if let Some(m) = methane {
            let mut order: Vec<usize> = (0..ds.len()).filter(|&i| i != m).collect();
            order.push(m);
            let chunks = chunk_batches(&ds, &order, ds.len() - 1);
            assert_eq!(chunks.len(), 1);
        }
        let order: Vec<usize> = (0..ds.len()).collect();
        assert_eq!(chunk_batches(&ds, &order, 5).len(), 5);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.val_fraction = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let json = r#"{"lr": 0.01, "seed": 3}"#;
        let parsed: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.lr, 0.01);
        assert_eq!(parsed.batch_size, 128);
    }

    #[test]
    fn predict_graphs_matches_single_batch() {
        let ds = chain_dataset(1, |_, _| true);
        let params = ModelParams::init(tiny_config(1).model_config(), 1, SeedKey::new(1));
        let graphs: Vec<&FeaturizedGraph> = ds.compounds().iter().map(|c| &c.graph).collect();
        let a = predict_graphs(&params, &graphs, &[0], 5).unwrap();
        let b = predict(&params, &GraphBatch::new(&graphs).unwrap(), &[0]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
