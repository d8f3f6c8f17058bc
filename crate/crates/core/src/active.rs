//! Pool-based active learning with a single-task model ensemble.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Compound, DataError, HitDirection, TaskDataset};
use crate::featurize::FeaturizedGraph;
use crate::metrics::top_indices;
use crate::model::{ModelError, ModelParams};
use crate::rng::SeedKey;
use crate::train::{predict_graphs, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AlError {
    #[error("invalid active-learning config: {0}")]
    Config(String),
    #[error("pool has {pool} compounds but the budget is {budget}")]
    PoolExhausted { pool: usize, budget: usize },
    #[error("oracle failed on compound {index}: {message}")]
    Oracle { index: usize, message: String },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Acquisition {
    /// Best ensemble-mean prediction first.
    GreedyMean,
    /// Mean shifted by `beta` standard deviations towards the hit side.
    Ucb { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    pub ensemble_size: usize,
    pub total_budget: usize,
    pub n_rounds: usize,
    pub init_fraction: f64,
    pub acquisition: Acquisition,
    pub seed: u64,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            ensemble_size: 5,
            total_budget: 1000,
            n_rounds: 4,
            init_fraction: 0.5,
            acquisition: Acquisition::GreedyMean,
            seed: 0,
        }
    }
}

impl AlConfig {
    /// Batch sizes: the random initial batch, then one per acquisition round.
    /// Without rounds the initial batch takes the whole budget; otherwise the
    /// remainder is split evenly with any leftover going to the first rounds.
    pub fn schedule(&self) -> Result<Vec<usize>, AlError> {
        if self.ensemble_size == 0 {
            return Err(AlError::Config("ensemble_size must be at least 1".into()));
        }
        if self.total_budget == 0 {
            return Err(AlError::Config("total_budget must be positive".into()));
        }
        if self.n_rounds == 0 {
            return Ok(vec![self.total_budget]);
        }
        if !(self.init_fraction > 0.0 && self.init_fraction < 1.0) {
            return Err(AlError::Config("init_fraction must lie strictly between 0 and 1".into()));
        }
        let init = ((self.init_fraction * self.total_budget as f64).round() as usize).clamp(1, self.total_budget);
        let rest = self.total_budget - init;
        if rest < self.n_rounds {
            return Err(AlError::Config(format!(
                "{rest} labels left after the initial batch cannot fill {} rounds",
                self.n_rounds
            )));
        }
        let (each, extra) = (rest / self.n_rounds, rest % self.n_rounds);
        let mut sizes = vec![init];
        sizes.extend((0..self.n_rounds).map(|r| each + usize::from(r < extra)));
        Ok(sizes)
    }

    /// Training seed of ensemble member `j`; member 0 uses the base seed.
    pub fn member_seed(base: u64, j: usize) -> u64 {
        if j == 0 {
            base
        } else {
            SeedKey::new(base).named("member").split(j as u64).value()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled_count: usize,
    pub pool_size: usize,
    /// Mean acquisition score of the batch picked this round; empty for the
    /// random initial batch.
    pub mean_acquisition_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AlOutcome {
    pub ensemble: Vec<ModelParams>,
    /// Pool indices with their oracle labels, in acquisition order.
    pub labeled: Vec<(usize, f64)>,
    pub log: Vec<RoundRecord>,
}

/// Mean and population standard deviation of the members' task-0
/// predictions, one pair per graph.
pub fn ensemble_stats(
    ensemble: &[ModelParams],
    graphs: &[&FeaturizedGraph],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>), AlError> {
    if ensemble.is_empty() {
        return Err(AlError::EmptyEnsemble);
    }
    let preds: Vec<Vec<f64>> = ensemble
        .iter()
        .map(|m| predict_graphs(m, graphs, &[0], batch_size).map(|t| t.into_data()))
        .collect::<Result<_, _>>()?;
    // Welford updates; exact when all members agree.
    let mut mean = vec![0.0; graphs.len()];
    let mut m2 = vec![0.0; graphs.len()];
    for (j, p) in preds.iter().enumerate() {
        let n = (j + 1) as f64;
        for ((m, s), v) in mean.iter_mut().zip(&mut m2).zip(p) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }
    let k = ensemble.len() as f64;
    let std = m2.iter().map(|s| (s / k).max(0.0).sqrt()).collect();
    Ok((mean, std))
}

/// Arithmetic mean of the members' predictions.
pub fn ensemble_predict(
    ensemble: &[ModelParams],
    graphs: &[&FeaturizedGraph],
    batch_size: usize,
) -> Result<Vec<f64>, AlError> {
    Ok(ensemble_stats(ensemble, graphs, batch_size)?.0)
}

/// Acquisition scores; better candidates rank first in `direction`.
pub fn acquisition_scores(mean: &[f64], std: &[f64], acquisition: Acquisition, direction: HitDirection) -> Vec<f64> {
    match acquisition {
        Acquisition::GreedyMean => mean.to_vec(),
        Acquisition::Ucb { beta } => {
            let sign = match direction {
                HitDirection::LowerIsBetter => -1.0,
                HitDirection::HigherIsBetter => 1.0,
            };
            mean.iter().zip(std).map(|(m, s)| m + sign * beta * s).collect()
        }
    }
}

fn labeled_dataset(pool: &[Compound], labeled: &[(usize, f64)], direction: HitDirection) -> Result<TaskDataset, AlError> {
    Ok(TaskDataset::new(
        labeled.iter().map(|&(i, _)| pool[i].clone()).collect(),
        vec!["target".into()],
        vec![direction],
        labeled.iter().map(|&(_, y)| vec![Some(y)]).collect(),
    )?)
}

/// Trains one model per member seed on `ds`.
pub fn train_ensemble(ds: &TaskDataset, size: usize, config: &TrainConfig) -> Result<Vec<ModelParams>, AlError> {
    (0..size)
        .into_par_iter()
        .map(|j| {
            let cfg = TrainConfig {
                seed: AlConfig::member_seed(config.seed, j),
                ..*config
            };
            Ok(train(ds, &cfg)?.params)
        })
        .collect()
}

/// Label a random initial batch, then alternate between training the
/// ensemble and labelling the best-scoring remaining compounds. The returned
/// ensemble is trained on the final labelled set.
pub fn al_run(
    pool: &[Compound],
    oracle: &mut dyn FnMut(usize, &Compound) -> Result<f64, String>,
    direction: HitDirection,
    config: &AlConfig,
    train_config: &TrainConfig,
) -> Result<AlOutcome, AlError> {
    let schedule = config.schedule()?;
    if pool.len() < config.total_budget {
        return Err(AlError::PoolExhausted {
            pool: pool.len(),
            budget: config.total_budget,
        });
    }
    let train_config = TrainConfig {
        seed: config.seed,
        ..*train_config
    };
    let mut ask = |i: usize, labeled: &mut Vec<(usize, f64)>| -> Result<(), AlError> {
        let y = oracle(i, &pool[i]).map_err(|message| AlError::Oracle { index: i, message })?;
        if !y.is_finite() {
            return Err(AlError::Oracle {
                index: i,
                message: format!("non-finite label {y}"),
            });
        }
        labeled.push((i, y));
        Ok(())
    };

    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    remaining.shuffle(&mut SeedKey::new(config.seed).named("al-init").rng());
    let mut labeled = Vec::with_capacity(config.total_budget);
    for &i in &remaining[..schedule[0]] {
        ask(i, &mut labeled)?;
    }
    remaining.drain(..schedule[0]);
    remaining.sort_unstable();
    let mut log = vec![RoundRecord {
        round: 0,
        labeled_count: labeled.len(),
        pool_size: remaining.len(),
        mean_acquisition_score: None,
    }];

    for (round, &size) in schedule.iter().enumerate().skip(1) {
        let ds = labeled_dataset(pool, &labeled, direction)?;
        let ensemble = train_ensemble(&ds, config.ensemble_size, &train_config)?;
        let graphs: Vec<&FeaturizedGraph> = remaining.iter().map(|&i| &pool[i].graph).collect();
        let (mean, std) = ensemble_stats(&ensemble, &graphs, train_config.batch_size.max(256))?;
        let scores = acquisition_scores(&mean, &std, config.acquisition, direction);
        let picked = top_indices(&scores, direction, size);
        let mean_score = picked.iter().map(|&k| scores[k]).sum::<f64>() / picked.len() as f64;
        let mut taken = vec![false; remaining.len()];
        for &k in &picked {
            ask(remaining[k], &mut labeled)?;
            taken[k] = true;
        }
        let mut k = 0;
        remaining.retain(|_| {
            k += 1;
            !taken[k - 1]
        });
        log.push(RoundRecord {
            round,
            labeled_count: labeled.len(),
            pool_size: remaining.len(),
            mean_acquisition_score: Some(mean_score),
        });
    }

    let ds = labeled_dataset(pool, &labeled, direction)?;
    let ensemble = train_ensemble(&ds, config.ensemble_size, &train_config)?;
    Ok(AlOutcome {
        ensemble,
        labeled,
        log,
    })
}

/// Round log as CSV text.
pub fn log_csv(log: &[RoundRecord]) -> String {
    let mut out = String::from("round,labeled_count,pool_size,mean_acquisition_score\n");
    for r in log {
        let score = r.mean_acquisition_score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.round, r.labeled_count, r.pool_size, score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_gen, SynthConfig};
    use crate::train::train_single_task;

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            dim: 8,
            layers: 1,
            head_hidden: 8,
            batch_size: 16,
            min_epochs: 1,
            patience: 1,
            max_epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn pool(n: usize) -> (Vec<Compound>, Vec<f64>) {
        let data = synth_gen(&SynthConfig {
            n_compounds: n,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let ds = data.to_dataset().unwrap();
        (ds.compounds().to_vec(), data.latent)
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = AlConfig {
            total_budget: 1000,
            ..AlConfig::default()
        };
        assert_eq!(cfg.schedule().unwrap(), vec![500, 125, 125, 125, 125]);
        let cfg = AlConfig {
            total_budget: 203,
            ..AlConfig::default()
        };
        let s = cfg.schedule().unwrap();
        assert_eq!(s, vec![102, 26, 25, 25, 25]);
        assert_eq!(s.iter().sum::<usize>(), 203);
        let cfg = AlConfig {
            n_rounds: 0,
            total_budget: 7,
            ..AlConfig::default()
        };
        assert_eq!(cfg.schedule().unwrap(), vec![7]);
    }

    #[test]
    fn ensemble_mean_and_ucb() {
        let (compounds, _) = pool(6);
        let graphs: Vec<&FeaturizedGraph> = compounds.iter().map(|c| &c.graph).collect();
        let m = ModelParams::init(tiny_train().model_config(), 1, SeedKey::new(1));
        let members = vec![m.clone(); 5];
        let (mean, std) = ensemble_stats(&members, &graphs, 4).unwrap();
        let single = predict_graphs(&m, &graphs, &[0], 4).unwrap();
        assert_eq!(mean, single.data());
        assert!(std.iter().all(|&s| s == 0.0));
        let ucb = acquisition_scores(&mean, &std, Acquisition::Ucb { beta: 2.0 }, HitDirection::LowerIsBetter);
        assert_eq!(ucb, mean);
        assert!(matches!(ensemble_stats(&[], &graphs, 4), Err(AlError::EmptyEnsemble)));
    }

    #[test]
    fn ucb_shifts_towards_hits() {
        let s = acquisition_scores(&[1.0], &[0.5], Acquisition::Ucb { beta: 2.0 }, HitDirection::LowerIsBetter);
        assert_eq!(s, vec![0.0]);
        let s = acquisition_scores(&[1.0], &[0.5], Acquisition::Ucb { beta: 2.0 }, HitDirection::HigherIsBetter);
        assert_eq!(s, vec![2.0]);
    }

    #[test]
    fn budget_is_exact_and_labels_are_unique() {
        let (compounds, latent) = pool(60);
        let cfg = AlConfig {
            ensemble_size: 2,
            total_budget: 23,
            n_rounds: 3,
            seed: 5,
            ..AlConfig::default()
        };
        let mut oracle = |i: usize, _: &Compound| Ok(latent[i]);
        let out = al_run(&compounds, &mut oracle, HitDirection::LowerIsBetter, &cfg, &tiny_train()).unwrap();
        assert_eq!(out.labeled.len(), 23);
        let mut idx: Vec<usize> = out.labeled.iter().map(|p| p.0).collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 23);
        assert_eq!(out.ensemble.len(), 2);
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.log.last().unwrap().pool_size, 60 - 23);
        assert!(log_csv(&out.log).starts_with("round,labeled_count,pool_size,mean_acquisition_score\n0,12,48,\n"));
    }

    #[test]
    fn single_member_single_round_is_single_task_training() {
        let (compounds, latent) = pool(40);
        let cfg = AlConfig {
            ensemble_size: 1,
            total_budget: 20,
            n_rounds: 0,
            seed: 8,
            ..AlConfig::default()
        };
        let mut oracle = |i: usize, _: &Compound| Ok(latent[i]);
        let tc = tiny_train();
        let out = al_run(&compounds, &mut oracle, HitDirection::LowerIsBetter, &cfg, &tc).unwrap();
        let ds = labeled_dataset(&compounds, &out.labeled, HitDirection::LowerIsBetter).unwrap();
        let direct = train_single_task(&ds, 0, &TrainConfig { seed: 8, ..tc }).unwrap();
        assert_eq!(out.ensemble[0], direct.params);
    }

    #[test]
    fn errors() {
        let (compounds, _) = pool(10);
        let cfg = AlConfig {
            total_budget: 11,
            ..AlConfig::default()
        };
        let mut oracle = |_: usize, _: &Compound| Ok(0.0);
        assert!(matches!(
            al_run(&compounds, &mut oracle, HitDirection::LowerIsBetter, &cfg, &tiny_train()),
            Err(AlError::PoolExhausted { .. })
        ));
        let cfg = AlConfig {
            total_budget: 8,
            n_rounds: 0,
            ..AlConfig::default()
        };
        let mut failing = |i: usize, _: &Compound| if i.is_multiple_of(2) { Err("offline".to_string()) } else { Ok(1.0) };
        assert!(matches!(
            al_run(&compounds, &mut failing, HitDirection::LowerIsBetter, &cfg, &tiny_train()),
            Err(AlError::Oracle { .. })
        ));
    }
}
