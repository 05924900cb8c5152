//! RGB-thermal segmentation network, losses, optimizers and training loop.

pub mod decoder;
pub mod encoder;
pub mod fusion;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod segmenter;
pub mod train;

pub use decoder::Decoder;
pub use encoder::{Encoder, STAGE_STRIDES};
pub use fusion::{
    build_fusion, fusion_registry, AdditionFusion, CmSsaBlock, CmSsaTrace, FuseInputs,
    FusionConfig, FusionContext, FusionStrategy, GateMode,
};
pub use layers::{Act, BatchNorm2d, ChannelLayerNorm, Conv2d, ConvBnRelu, Layer};
pub use loss::{
    dice_loss, softmax_classes, total_loss, weighted_cross_entropy, LossReport, IGNORE_INDEX,
};
pub use optim::{
    build_optimizer, optimizer_registry, poly_lr, Adam, Lookahead, Optimizer, OptimizerConfig,
};
pub use segmenter::{ModelConfig, Segmenter, INPUT_CHANNELS};
pub use train::{
    calibrate_batchnorm, evaluate_model, predict, Batch, StepRecord, TrainState, Trainer,
};
