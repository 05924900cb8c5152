//! Fusion ablation on held-out synthetic scenes.

use std::path::Path;

use serde::Serialize;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::model::evaluate_model;
use crate::run::commands::train;
use crate::run::config::{RunConfig, SplitRatios};

/// Every fusion strategy in benchmark order: full block, scan removed, plain sum.
pub const ABLATION_STRATEGIES: [&str; 3] = ["cm_ssa", "no_scan", "addition"];

/// The benchmark recipe: held-out scenes with noisy thermal, so ambiguous
/// classes have to be resolved from pooled evidence rather than single pixels.
pub fn benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.count = 96;
    cfg.data.split = SplitRatios {
        train: 2.0 / 3.0,
        val: 0.0,
        test: 1.0 / 3.0,
    };
    cfg.data.scene = SceneSpec {
        thermal_noise: 0.5,
        ..SceneSpec::default()
    };
    cfg.train.batch_size = 8;
    cfg.train.max_iter = Some(150);
    cfg.train.base_lr = 2e-3;
    cfg.train.checkpoint_every = 150;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub strategy: String,
    pub seed: u64,
    pub zero_thermal: bool,
    pub test_miou: f64,
    pub train_miou: f64,
}

/// Train `base` with `strategy` and seed, and score it on the test split.
pub fn ablation_run(
    base: &RunConfig,
    strategy: &str,
    seed: u64,
    zero_thermal: bool,
    out: &Path,
) -> Result<AblationRun> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.fusion.strategy = strategy.into();
    cfg.train.zero_thermal = zero_thermal;
    cfg.output_dir = out.to_owned();
    let mut outcome = train(&cfg, None)?;
    if outcome.splits.test.is_empty() {
        return Err(Error::Dataset(
            "ablation needs a non-empty test split".into(),
        ));
    }
    let (rep, _) = evaluate_model(
        &mut outcome.trainer.model,
        &outcome.splits.test,
        cfg.train.batch_size,
        zero_thermal,
    )?;
    Ok(AblationRun {
        strategy: strategy.into(),
        seed,
        zero_thermal,
        test_miou: rep.miou,
        train_miou: outcome.final_train_miou,
    })
}

/// Mean test mIoU over the runs matching `strategy` and `zero_thermal`.
pub fn mean_miou(runs: &[AblationRun], strategy: &str, zero_thermal: bool) -> Option<f64> {
    let xs: Vec<f64> = runs
        .iter()
        .filter(|r| r.strategy == strategy && r.zero_thermal == zero_thermal)
        .map(|r| r.test_miou)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
