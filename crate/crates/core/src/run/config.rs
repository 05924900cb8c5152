//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{AugmentPolicy, SceneSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Exactly one of `max_iter` and `epochs` is set; epochs are converted to iterations.
    pub max_iter: Option<u64>,
    pub epochs: Option<u64>,
    pub base_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    /// Registered optimizer name: `adam` or `adam_lookahead`.
    pub optimizer: String,
    pub augment: AugmentPolicy,
    /// Save (and log train mIoU) every this many steps; the last step is always saved.
    pub checkpoint_every: u64,
    /// Recompute batch-norm running statistics from the training set before each save.
    pub calibrate_bn: bool,
    /// Feed zeros instead of the thermal image (RGB-only ablation).
    pub zero_thermal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_iter: Some(300),
            epochs: None,
            base_lr: 1e-4,
            power: 0.9,
            weight_decay: 5e-4,
            optimizer: "adam".into(),
            augment: AugmentPolicy::default(),
            checkpoint_every: 100,
            calibrate_bn: true,
            zero_thermal: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic source: scene generator and number of scenes, divided by `split`.
    pub scene: SceneSpec,
    pub count: usize,
    pub split: SplitRatios,
    /// Directory source: dataset root holding `train/`, `val/`, `test/`.
    pub root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            scene: SceneSpec::default(),
            count: 16,
            split: SplitRatios::default(),
            root: None,
        }
    }
}

impl SplitRatios {
    /// Sample counts `(train, val, test)` summing to `count`.
    pub fn counts(&self, count: usize) -> (usize, usize, usize) {
        let train = (self.train * count as f64).round() as usize;
        let val = ((self.val * count as f64).round() as usize).min(count - train.min(count));
        let train = train.min(count);
        (train, val, count - train - val)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn max_iter(&self, train_len: usize) -> u64 {
        match (self.train.max_iter, self.train.epochs) {
            (Some(m), _) => m,
            (None, Some(e)) => e * (train_len.div_ceil(self.train.batch_size.max(1))) as u64,
            (None, None) => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        match (t.max_iter, t.epochs) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "set only one of train.max_iter and train.epochs",
                ))
            }
            (None, None) => return Err(Error::config("set train.max_iter or train.epochs")),
            _ => {}
        }
        if !(t.base_lr >= 0.0 && t.base_lr.is_finite()) || !(t.power > 0.0) || t.weight_decay < 0.0
        {
            return Err(Error::config(
                "train.base_lr, power and weight_decay must be finite and non-negative",
            ));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every must be positive"));
        }
        if !(0.0..=1.0).contains(&t.augment.hflip_p) {
            return Err(Error::config("train.augment.hflip_p must be in [0, 1]"));
        }
        let s = &self.data.split;
        if [s.train, s.val, s.test].iter().any(|&r| r < 0.0)
            || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9
        {
            return Err(Error::config(
                "data.split ratios must be non-negative and sum to 1",
            ));
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.data.scene.validate()?;
                if self.data.scene.num_classes != self.model.num_classes {
                    return Err(Error::config(format!(
                        "scene has {} classes but the model predicts {}",
                        self.data.scene.num_classes, self.model.num_classes
                    )));
                }
            }
            DataSource::Directory => {
                if self.data.root.is_none() {
                    return Err(Error::config(
                        "data.root is required for the directory source",
                    ));
                }
            }
        }
        self.optimizer_config().kind_known()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.train.optimizer.clone(),
            weight_decay: self.train.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    /// Make every path absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| {
            if p.is_absolute() {
                p.to_owned()
            } else {
                base.join(p)
            }
        };
        self.output_dir = abs(&self.output_dir);
        if let Some(r) = &self.data.root {
            self.data.root = Some(abs(r));
        }
    }
}
