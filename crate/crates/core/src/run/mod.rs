//! Run configuration, checkpoints and the commands built on them.

pub mod ablation;
pub mod checkpoint;
pub mod commands;
pub mod config;

pub use ablation::{ablation_run, benchmark_config, mean_miou, AblationRun, ABLATION_STRATEGIES};
pub use checkpoint::{Checkpoint, Manifest, TensorEntry, TensorKind};
pub use commands::{
    batch_indices, checkpoint_path, evaluate, gen_data, new_trainer, predict_files, prepare_data,
    synthetic_splits, train, EvalReport, MetricRecord, Splits, TrainOutcome, PALETTE, SPLITS,
};
pub use config::{DataConfig, DataSource, RunConfig, SplitRatios, TrainConfig};
