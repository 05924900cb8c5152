//! Binary checkpoint: `"CMSS"`, `u32` format version, `u64` manifest length,
//! a JSON manifest, then every tensor as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_optimizer, Segmenter, TrainState, Trainer};
use crate::numerics::{Module, Rng, Tensor};
use crate::run::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"CMSS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: TensorKind,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub step: u64,
    pub max_iter: u64,
    /// Trainable scalars only; buffers and optimizer state are excluded.
    pub param_count: usize,
    pub optimizer: String,
    pub optimizer_steps: u64,
    /// Eval-mode mIoU on the training split at save time.
    pub train_miou: Option<f64>,
    /// Run configuration; `output_dir` is blanked so that the location of a
    /// run does not change its checkpoints.
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<Vec<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer<f32>, config: &RunConfig, train_miou: Option<f64>) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: &str, t: &Tensor<f32>, kind| {
            tensors.push(TensorEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                kind,
            });
            data.push(t.data().to_vec());
        };
        trainer
            .model
            .visit_params(&mut |p| push(&p.name, &p.value, TensorKind::Param));
        trainer
            .model
            .visit_buffers(&mut |b| push(&b.name, &b.value, TensorKind::Buffer));
        trainer
            .optimizer
            .visit_state(&mut |n, t| push(n, t, TensorKind::Optimizer));
        let mut snapshot = config.clone();
        snapshot.output_dir = Default::default();
        Self {
            manifest: Manifest {
                step: trainer.state.step,
                max_iter: trainer.state.max_iter,
                param_count: trainer.model.num_params(),
                optimizer: trainer.optimizer.name().to_owned(),
                optimizer_steps: trainer.optimizer.steps(),
                train_miou,
                config: snapshot,
                tensors,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let payload: usize = self.data.iter().map(|d| 4 * d.len()).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CMSS magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        let payload = &body[mlen..];
        let want: usize = manifest.tensors.iter().map(|t| 4 * t.len()).sum();
        if payload.len() != want {
            return Err(corrupt(format!(
                "payload is {} bytes, manifest describes {want}",
                payload.len()
            )));
        }
        if let Some(t) = manifest.tensors.iter().find(|t| t.dtype != "f32") {
            return Err(corrupt(format!(
                "tensor {} has unsupported dtype {}",
                t.name, t.dtype
            )));
        }
        let mut data = Vec::with_capacity(manifest.tensors.len());
        let mut off = 0;
        for t in &manifest.tensors {
            let n = t.len();
            data.push(
                payload[off..off + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            off += 4 * n;
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy every tensor into `trainer`, which must have the same architecture and optimizer.
    pub fn restore(&self, trainer: &mut Trainer<f32>) -> Result<()> {
        if trainer.optimizer.name() != self.manifest.optimizer {
            return Err(Error::config(format!(
                "checkpoint optimizer {} differs from {}",
                self.manifest.optimizer,
                trainer.optimizer.name()
            )));
        }
        let mut slots = self.manifest.tensors.iter().zip(&self.data);
        let mut res: Result<()> = Ok(());
        let mut next = |name: &str, t: &mut Tensor<f32>, kind: TensorKind| {
            if res.is_err() {
                return;
            }
            res = match slots.next() {
                Some((e, d)) if e.name == name && e.kind == kind && e.shape == t.shape() => {
                    t.data_mut().copy_from_slice(d);
                    Ok(())
                }
                Some((e, _)) => Err(Error::config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                ))),
                None => Err(Error::config(format!("checkpoint lacks tensor {name}"))),
            };
        };
        trainer
            .model
            .visit_params_mut(&mut |p| next(&p.name, &mut p.value, TensorKind::Param));
        trainer
            .model
            .visit_buffers_mut(&mut |b| next(&b.name, &mut b.value, TensorKind::Buffer));
        trainer
            .optimizer
            .visit_state_mut(&mut |n, t| next(n, t, TensorKind::Optimizer));
        res?;
        if slots.next().is_some() {
            return Err(Error::config(
                "checkpoint holds tensors the model does not have",
            ));
        }
        trainer.optimizer.set_steps(self.manifest.optimizer_steps);
        trainer.state.step = self.manifest.step;
        trainer.state.max_iter = self.manifest.max_iter;
        Ok(())
    }

    /// Rebuild a trainer (model, optimizer, schedule state) from the manifest.
    pub fn to_trainer(&self, class_weights: Vec<f64>) -> Result<Trainer<f32>> {
        let cfg = &self.manifest.config;
        let model = Segmenter::<f32>::new(&cfg.model, &Rng::new(cfg.seed))?;
        let optimizer = build_optimizer(&model, &cfg.optimizer_config())?;
        let mut trainer = Trainer {
            model,
            optimizer,
            state: TrainState {
                step: 0,
                max_iter: self.manifest.max_iter,
                base_lr: cfg.train.base_lr,
                power: cfg.train.power,
                rng: Rng::new(cfg.seed),
            },
            class_weights,
        };
        self.restore(&mut trainer)?;
        Ok(trainer)
    }
}
