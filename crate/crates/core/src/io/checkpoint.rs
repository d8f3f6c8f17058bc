use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::data::HitDirection;
use crate::featurize::{FeatureSchema, FeaturizedGraph};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use crate::train::{predict_graphs, StopReason, TrainLog};

pub const MAGIC: &[u8; 8] = b"DMTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

impl From<&TrainLog> for LogSummary {
    fn from(log: &TrainLog) -> Self {
        LogSummary {
            epochs: log.epochs.len(),
            best_epoch: log.best_epoch,
            best_val_loss: log.best_val_loss,
            stop_epoch: log.stop_epoch,
            stop_reason: log.stop_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dim: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub task_names: Vec<String>,
    pub hit_directions: Vec<HitDirection>,
    pub schema_hash: String,
    pub seed: u64,
    /// Number of models; predictions average over them.
    pub ensemble_size: usize,
    pub log_summary: Vec<LogSummary>,
}

/// One model or an ensemble sharing one architecture and task list.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub members: Vec<ModelParams>,
}

impl Checkpoint {
    pub fn new(
        members: Vec<ModelParams>,
        task_names: Vec<String>,
        hit_directions: Vec<HitDirection>,
        seed: u64,
        logs: &[&TrainLog],
    ) -> Result<Self, IoError> {
        let first = members
            .first()
            .ok_or_else(|| IoError::Format("checkpoint needs at least one model".into()))?;
        let config = first.config;
        if members
            .iter()
            .any(|m| m.config != config || m.num_tasks() != task_names.len())
        {
            return Err(IoError::Format("ensemble members disagree on architecture".into()));
        }
        if hit_directions.len() != task_names.len() {
            return Err(IoError::Format("one hit direction per task required".into()));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                dim: config.dim,
                layers: config.layers,
                head_hidden: config.head_hidden,
                dropout: config.dropout,
                task_names,
                hit_directions,
                schema_hash: FeatureSchema.hash(),
                seed,
                ensemble_size: members.len(),
                log_summary: logs.iter().map(|l| LogSummary::from(*l)).collect(),
            },
            members,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.header.dim,
            layers: self.header.layers,
            head_hidden: self.header.head_hidden,
            dropout: self.header.dropout,
        }
    }

    /// Eval-mode predictions for `tasks`, averaged over the members with
    /// incremental means so a one-model ensemble returns that model's output
    /// unchanged.
    pub fn predict(&self, graphs: &[&FeaturizedGraph], tasks: &[usize], batch_size: usize) -> Result<Tensor, ModelError> {
        let mut mean = Tensor::zeros(graphs.len(), tasks.len());
        for (j, m) in self.members.iter().enumerate() {
            let p = predict_graphs(m, graphs, tasks, batch_size)?;
            let n = (j + 1) as f64;
            for (acc, v) in mean.data_mut().iter_mut().zip(p.data()) {
                *acc += (v - *acc) / n;
            }
        }
        Ok(mean)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.header.task_names.iter().position(|t| t == name)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), IoError> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let arrays: Vec<(String, &Tensor)> = self
            .members
            .iter()
            .enumerate()
            .flat_map(|(j, m)| {
                m.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("member_{j}/{n}"), t))
            })
            .collect();
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, t) in arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IoError> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    /// Read a checkpoint without checking the feature schema.
    pub fn read<R: Read>(mut r: R) -> Result<Self, IoError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IoError::Format("not a checkpoint file".into()));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(IoError::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| IoError::Format("array name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| IoError::Format(format!("array {name} is implausibly large")))?;
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::new(rows, cols, data).map_err(|e| IoError::Format(e.to_string()))?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(IoError::Format("trailing bytes after the last array".into()));
        }

        let config = ModelConfig {
            dim: header.dim,
            layers: header.layers,
            head_hidden: header.head_hidden,
            dropout: header.dropout,
        };
        let n = header.ensemble_size;
        if n == 0 || arrays.len() % n != 0 {
            return Err(IoError::Format("array count does not split across the ensemble".into()));
        }
        let per = arrays.len() / n;
        let mut members = Vec::with_capacity(n);
        let mut iter = arrays.into_iter();
        for j in 0..n {
            let prefix = format!("member_{j}/");
            let named = iter
                .by_ref()
                .take(per)
                .map(|(name, t)| match name.strip_prefix(&prefix) {
                    Some(rest) => Ok((rest.to_string(), t)),
                    None => Err(IoError::Format(format!("unexpected array {name}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            members.push(
                ModelParams::from_named(config, header.task_names.len(), named)
                    .map_err(|e| IoError::Format(e.to_string()))?,
            );
        }
        Ok(Checkpoint { header, members })
    }

    /// Read a checkpoint and require the current feature schema.
    pub fn read_for_inference<R: Read>(r: R) -> Result<Self, IoError> {
        let ckpt = Self::read(r)?;
        let current = FeatureSchema.hash();
        if ckpt.header.schema_hash != current {
            return Err(IoError::SchemaMismatch {
                found: ckpt.header.schema_hash,
                expected: current,
            });
        }
        Ok(ckpt)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedKey;
    use proptest::prelude::*;

    fn sample(seed: u64, members: usize) -> Checkpoint {
        let config = ModelConfig {
            dim: 6,
            layers: 2,
            head_hidden: 5,
            dropout: 0.2,
        };
        let mut ms: Vec<ModelParams> = (0..members)
            .map(|j| ModelParams::init(config, 2, SeedKey::new(seed).split(j as u64)))
            .collect();
        ms[0].layers[1].running.var.data_mut()[0] = f64::MIN_POSITIVE;
        ms[0].heads[1].b2 = Tensor::scalar(-0.0);
        Checkpoint::new(
            ms,
            vec!["T0".into(), "T1".into()],
            vec![HitDirection::LowerIsBetter, HitDirection::HigherIsBetter],
            seed,
            &[],
        )
        .unwrap()
    }

    fn bits(c: &Checkpoint) -> Vec<u64> {
        c.members
            .iter()
            .flat_map(|m| m.named_tensors())
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample(3, 2);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::read_for_inference(bytes.as_slice()).unwrap();
        assert_eq!(back.header, c.header);
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn schema_mismatch_is_detected() {
        let mut c = sample(1, 1);
        c.header.schema_hash = "0000".into();
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::read(bytes.as_slice()).is_ok());
        assert!(matches!(
            Checkpoint::read_for_inference(bytes.as_slice()),
            Err(IoError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(1, 1).to_bytes().unwrap();
        assert!(matches!(Checkpoint::read(&b"NOTACKPT"[..]), Err(IoError::Format(_))));
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::read(longer.as_slice()), Err(IoError::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_any_seed(seed in any::<u64>(), members in 1usize..3) {
            let c = sample(seed, members);
            let back = Checkpoint::read(c.to_bytes().unwrap().as_slice()).unwrap();
            prop_assert_eq!(bits(&back), bits(&c));
        }
    }
}
