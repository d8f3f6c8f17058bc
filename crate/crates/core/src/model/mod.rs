//! The GIN backbone shared by all tasks and the per-task regression heads.
//!
//! Node states start as the sum of seven atom-feature embeddings. Each of
//! the `layers` GIN layers adds, for every atom, its own state, its
//! neighbours' states, the embeddings of its incident bonds and a learned
//! self-loop edge embedding, then applies a two-layer perceptron with a
//! `2·dim` hidden layer followed by batch norm, ReLU and dropout. The graph
//! embedding is the mean of the final node states. Each task head is
//! `dim → head_hidden → 1` with ReLU and dropout in between.

mod batch;
mod forward;
mod gradcheck;

pub use batch::GraphBatch;
pub use gradcheck::{check_loss_gradients, ParamGradCheck};
pub use forward::{
    embed, embed_inputs, forward, gin_forward, predict, EmbeddedInputs, ForwardOutput,
    GradScope, Mode,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featurize::{ATOM_FIELD_WIDTHS, BOND_FIELD_WIDTHS, NUM_ATOM_FIELDS, NUM_BOND_FIELDS};
use crate::rng::SeedKey;
use crate::tensor::{RunningStats, Tensor, TensorError};

pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("graph {index} in the batch has no atoms")]
    EmptyGraph { index: usize },
    #[error("batch contains no graphs")]
    EmptyBatch,
    #[error("task {task} requested but the model has {heads} heads")]
    UnknownTask { task: usize, heads: usize },
    #[error("feature field {field} index {index} is outside width {width}")]
    FeatureOutOfRange {
        field: usize,
        index: usize,
        width: usize,
    },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            layers: 8,
            head_hidden: 256,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayerParams {
    pub edge_tables: Vec<Tensor>,
    pub self_loop: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    pub fn init(config: &ModelConfig, key: SeedKey) -> Self {
        let mut rng = key.rng();
        HeadParams {
            w1: Tensor::glorot(config.dim, config.head_hidden, &mut rng),
            b1: Tensor::zeros(1, config.head_hidden),
            w2: Tensor::glorot(config.head_hidden, 1, &mut rng),
            b2: Tensor::zeros(1, 1),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// All learnable arrays plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub node_tables: Vec<Tensor>,
    pub layers: Vec<GinLayerParams>,
    pub heads: Vec<HeadParams>,
}

const HEAD_PARAM_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
const LAYER_PARAM_NAMES: [&str; 10] = [
    "edge_table_0",
    "edge_table_1",
    "edge_table_2",
    "self_loop",
    "w1",
    "b1",
    "w2",
    "b2",
    "gamma",
    "beta",
];

impl ModelParams {
    /// Fresh parameters. The backbone and each head draw from separate
    /// streams of `key`, so head `i` is the same whatever the task count.
    pub fn init(config: ModelConfig, num_tasks: usize, key: SeedKey) -> Self {
        let mut rng = key.named("backbone").rng();
        let d = config.dim;
        let node_tables = ATOM_FIELD_WIDTHS
            .iter()
            .map(|&w| Tensor::normal(w, d, EMBEDDING_INIT_STD, &mut rng))
            .collect();
        let layers = (0..config.layers)
            .map(|_| GinLayerParams {
                edge_tables: BOND_FIELD_WIDTHS
                    .iter()
                    .map(|&w| Tensor::normal(w, d, EMBEDDING_INIT_STD, &mut rng))
                    .collect(),
                self_loop: Tensor::normal(1, d, EMBEDDING_INIT_STD, &mut rng),
                w1: Tensor::glorot(d, 2 * d, &mut rng),
                b1: Tensor::zeros(1, 2 * d),
                w2: Tensor::glorot(2 * d, d, &mut rng),
                b2: Tensor::zeros(1, d),
                gamma: Tensor::full(1, d, 1.0),
                beta: Tensor::zeros(1, d),
                running: RunningStats::new(d),
            })
            .collect();
        let heads = (0..num_tasks)
            .map(|t| HeadParams::init(&config, Self::head_key(key, t)))
            .collect();
        ModelParams {
            config,
            node_tables,
            layers,
            heads,
        }
    }

    pub fn head_key(key: SeedKey, task: usize) -> SeedKey {
        key.named("head").split(task as u64)
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Trainable backbone tensors in a fixed order.
    pub fn backbone_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.node_tables.iter().collect();
        for l in &self.layers {
            out.extend(l.edge_tables.iter());
            out.extend([&l.self_loop, &l.w1, &l.b1, &l.w2, &l.b2, &l.gamma, &l.beta]);
        }
        out
    }

    /// Every trainable tensor: the backbone followed by each head.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = self.backbone_tensors();
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.node_tables.iter_mut().collect();
        for l in &mut self.layers {
            out.extend(l.edge_tables.iter_mut());
            out.extend([
                &mut l.self_loop,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.gamma,
                &mut l.beta,
            ]);
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }

    pub fn num_backbone_tensors(&self) -> usize {
        NUM_ATOM_FIELDS + self.layers.len() * (NUM_BOND_FIELDS + 7)
    }

    /// Names aligned with [`ModelParams::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..NUM_ATOM_FIELDS)
            .map(|i| format!("node_table_{i}"))
            .collect();
        for k in 0..self.layers.len() {
            out.extend(LAYER_PARAM_NAMES.iter().map(|n| format!("layer_{k}.{n}")));
        }
        for t in 0..self.heads.len() {
            out.extend(HEAD_PARAM_NAMES.iter().map(|n| format!("head_{t}.{n}")));
        }
        out
    }

    /// Every stored array, running statistics included, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.trainable_names().into_iter().zip(self.trainable()).collect();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer_{k}.running_mean"), &l.running.mean));
            out.push((format!("layer_{k}.running_var"), &l.running.var));
        }
        out
    }

    /// Rebuild parameters from arrays in [`ModelParams::named_tensors`] order.
    pub fn from_named(
        config: ModelConfig,
        num_tasks: usize,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut params = ModelParams::init(config, num_tasks, SeedKey::new(0));
        let expected: Vec<(String, [usize; 2])> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(ModelError::Layout(format!(
                "expected {} arrays, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || *shape != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let mut iter = tensors.into_iter().map(|(_, t)| t);
        for slot in params.trainable_mut() {
            *slot = iter.next().expect("length checked");
        }
        for l in &mut params.layers {
            l.running.mean = iter.next().expect("length checked");
            l.running.var = iter.next().expect("length checked");
        }
        Ok(params)
    }

    /// Copy every backbone array (running statistics included) from `other`.
    pub fn copy_backbone_from(&mut self, other: &ModelParams) -> Result<(), ModelError> {
        if self.config.dim != other.config.dim || self.config.layers != other.config.layers {
            return Err(ModelError::Layout(format!(
                "backbone dim/layers {}/{} vs {}/{}",
                self.config.dim, self.config.layers, other.config.dim, other.config.layers
            )));
        }
        self.node_tables = other.node_tables.clone();
        self.layers = other.layers.clone();
        Ok(())
    }

    /// Digest of the backbone, running statistics included.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for t in self.backbone_tensors() {
            feed(t);
        }
        for l in &self.layers {
            feed(&l.running.mean);
            feed(&l.running.var);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}
