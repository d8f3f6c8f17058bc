//! Multi-task datasets with sparse labels, and the per-task validation split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::FeaturizedGraph;
use crate::rng::SeedKey;

/// Which end of a task's score scale counts as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitDirection {
    /// Docking scores: more negative is better.
    LowerIsBetter,
    /// Affinities such as pChEMBL: larger is better.
    HigherIsBetter,
}

impl HitDirection {
    /// Maps a score to a key where smaller always means better.
    pub fn rank_key(self, score: f64) -> f64 {
        match self {
            HitDirection::LowerIsBetter => score,
            HitDirection::HigherIsBetter => -score,
        }
    }

    pub fn is_better(self, a: f64, b: f64) -> bool {
        self.rank_key(a) < self.rank_key(b)
    }
}

impl std::str::FromStr for HitDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lower" | "lower_is_better" => Ok(HitDirection::LowerIsBetter),
            "higher" | "higher_is_better" => Ok(HitDirection::HigherIsBetter),
            other => Err(format!("unknown hit direction {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("compound {index} has no labelled task")]
    UnlabeledCompound { index: usize },
    #[error("label table has {got} entries, expected {expected}")]
    LabelShape { expected: usize, got: usize },
    #[error("task {task:?} has only {count} labels; at least 5 are needed for a validation split")]
    TooFewLabels { task: String, count: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("task {task:?} has {available} labels, {requested} requested")]
    NotEnoughLabels {
        task: String,
        requested: usize,
        available: usize,
    },
    #[error("non-finite label for compound {index}, task {task}")]
    NonFiniteLabel { index: usize, task: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compound {
    pub smiles: String,
    pub graph: FeaturizedGraph,
}

/// Compounds with labels for some subset of tasks. Task 0 is the new target
/// by convention; the rest are auxiliary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    compounds: Vec<Compound>,
    task_names: Vec<String>,
    directions: Vec<HitDirection>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl TaskDataset {
    /// `labels[i][t]` is the label of compound `i` for task `t`, if any.
    pub fn new(
        compounds: Vec<Compound>,
        task_names: Vec<String>,
        directions: Vec<HitDirection>,
        labels: Vec<Vec<Option<f64>>>,
    ) -> Result<Self, DataError> {
        let tasks = task_names.len();
        if directions.len() != tasks {
            return Err(DataError::LabelShape {
                expected: tasks,
                got: directions.len(),
            });
        }
        if labels.len() != compounds.len() {
            return Err(DataError::LabelShape {
                expected: compounds.len(),
                got: labels.len(),
            });
        }
        let mut values = Vec::with_capacity(compounds.len() * tasks);
        let mut mask = Vec::with_capacity(compounds.len() * tasks);
        for (i, row) in labels.iter().enumerate() {
            if row.len() != tasks {
                return Err(DataError::LabelShape {
                    expected: tasks,
                    got: row.len(),
                });
            }
            for (t, v) in row.iter().enumerate() {
                if v.is_some_and(|x| !x.is_finite()) {
                    return Err(DataError::NonFiniteLabel { index: i, task: t });
                }
                values.push(v.unwrap_or(0.0));
                mask.push(v.is_some());
            }
        }
        Self::from_parts(compounds, task_names, directions, values, mask)
    }

    fn from_parts(
        compounds: Vec<Compound>,
        task_names: Vec<String>,
        directions: Vec<HitDirection>,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self, DataError> {
        let tasks = task_names.len();
        for i in 0..compounds.len() {
            if !mask[i * tasks..(i + 1) * tasks].iter().any(|&m| m) {
                return Err(DataError::UnlabeledCompound { index: i });
            }
        }
        Ok(TaskDataset {
            compounds,
            task_names,
            directions,
            values,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.compounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compounds.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn compounds(&self) -> &[Compound] {
        &self.compounds
    }

    pub fn compound(&self, i: usize) -> &Compound {
        &self.compounds[i]
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn directions(&self) -> &[HitDirection] {
        &self.directions
    }

    pub fn task_index(&self, name: &str) -> Result<usize, DataError> {
        self.task_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownTask(name.to_string()))
    }

    pub fn label(&self, compound: usize, task: usize) -> Option<f64> {
        let i = compound * self.num_tasks() + task;
        self.mask[i].then(|| self.values[i])
    }

    /// Label values and presence mask of compound `i`, one entry per task.
    pub fn label_row(&self, i: usize) -> (&[f64], &[bool]) {
        let t = self.num_tasks();
        (&self.values[i * t..(i + 1) * t], &self.mask[i * t..(i + 1) * t])
    }

    pub fn labeled_count(&self, task: usize) -> usize {
        (0..self.len()).filter(|&i| self.label(i, task).is_some()).count()
    }

    pub fn total_labels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Compounds labelled for `task` and their labels.
    pub fn task_labels(&self, task: usize) -> Vec<(usize, f64)> {
        (0..self.len())
            .filter_map(|i| self.label(i, task).map(|v| (i, v)))
            .collect()
    }

    /// Keep only the labels where `keep(compound, task)` holds, dropping
    /// compounds left without labels.
    pub fn filter_labels(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Result<Self, DataError> {
        let t = self.num_tasks();
        let mut compounds = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for i in 0..self.len() {
            let row_mask: Vec<bool> = (0..t).map(|k| self.mask[i * t + k] && keep(i, k)).collect();
            if row_mask.iter().any(|&m| m) {
                compounds.push(self.compounds[i].clone());
                values.extend_from_slice(&self.values[i * t..(i + 1) * t]);
                mask.extend(row_mask);
            }
        }
        Self::from_parts(
            compounds,
            self.task_names.clone(),
            self.directions.clone(),
            values,
            mask,
        )
    }

    /// A dataset over the listed tasks only, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self, DataError> {
        let t = self.num_tasks();
        let mut compounds = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for i in 0..self.len() {
            if tasks.iter().any(|&k| self.mask[i * t + k]) {
                compounds.push(self.compounds[i].clone());
                for &k in tasks {
                    values.push(self.values[i * t + k]);
                    mask.push(self.mask[i * t + k]);
                }
            }
        }
        Self::from_parts(
            compounds,
            tasks.iter().map(|&k| self.task_names[k].clone()).collect(),
            tasks.iter().map(|&k| self.directions[k]).collect(),
            values,
            mask,
        )
    }

    /// Compounds at `indices`, in that order, with all their labels.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let t = self.num_tasks();
        let mut values = Vec::with_capacity(indices.len() * t);
        let mut mask = Vec::with_capacity(indices.len() * t);
        for &i in indices {
            values.extend_from_slice(&self.values[i * t..(i + 1) * t]);
            mask.extend_from_slice(&self.mask[i * t..(i + 1) * t]);
        }
        Self::from_parts(
            indices.iter().map(|&i| self.compounds[i].clone()).collect(),
            self.task_names.clone(),
            self.directions.clone(),
            values,
            mask,
        )
    }

    /// Mean label of each task, `None` for tasks without labels.
    pub fn task_means(&self) -> Vec<Option<f64>> {
        (0..self.num_tasks())
            .map(|t| {
                let labels = self.task_labels(t);
                (!labels.is_empty())
                    .then(|| labels.iter().map(|(_, v)| v).sum::<f64>() / labels.len() as f64)
            })
            .collect()
    }
}

/// Per-task random split of the labelled entries into train and validation
/// parts. Each task contributes `round(val_fraction · n_task)` validation
/// labels; a compound's labels for different tasks may land on different
/// sides.
pub fn split_train_val(
    ds: &TaskDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset), DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::BadFraction(val_fraction));
    }
    let t = ds.num_tasks();
    let key = SeedKey::new(seed).named("split");
    let mut in_val = vec![false; ds.len() * t];
    for task in 0..t {
        let mut labelled: Vec<usize> = ds.task_labels(task).into_iter().map(|(i, _)| i).collect();
        if labelled.is_empty() {
            continue;
        }
        if labelled.len() < 5 {
            return Err(DataError::TooFewLabels {
                task: ds.task_names[task].clone(),
                count: labelled.len(),
            });
        }
        labelled.shuffle(&mut key.split(task as u64).rng());
        let n_val = (val_fraction * labelled.len() as f64).round() as usize;
        for &i in &labelled[..n_val] {
            in_val[i * t + task] = true;
        }
    }
    let train = ds.filter_labels(|i, k| !in_val[i * t + k])?;
    let val = ds.filter_labels(|i, k| in_val[i * t + k])?;
    Ok((train, val))
}

/// Training data for one regime: `new_size` random labels of `new_task`
/// plus `aux_size` random labels of each auxiliary task (`None` keeps every
/// label). The new task becomes task 0, followed by the auxiliary tasks in
/// the given order.
pub fn compose_regime(
    ds: &TaskDataset,
    new_task: usize,
    new_size: Option<usize>,
    aux_tasks: &[usize],
    aux_size: Option<usize>,
    seed: u64,
) -> Result<TaskDataset, DataError> {
    let t = ds.num_tasks();
    let key = SeedKey::new(seed).named("regime");
    let mut keep = vec![false; ds.len() * t];
    let mut tasks = vec![new_task];
    tasks.extend(aux_tasks.iter().copied().filter(|&a| a != new_task));
    for (slot, &task) in tasks.iter().enumerate() {
        let mut labelled: Vec<usize> = ds.task_labels(task).into_iter().map(|(i, _)| i).collect();
        let want = if slot == 0 { new_size } else { aux_size }.unwrap_or(labelled.len());
        if labelled.len() < want {
            return Err(DataError::NotEnoughLabels {
                task: ds.task_names[task].clone(),
                requested: want,
                available: labelled.len(),
            });
        }
        labelled.shuffle(&mut key.split(task as u64).rng());
        for &i in &labelled[..want] {
            keep[i * t + task] = true;
        }
    }
    ds.filter_labels(|i, k| keep[i * t + k])?.select_tasks(&tasks)
}
