mod activation;
mod conv;
mod linear;
mod norm;
mod upsample;

pub use activation::{activation, activation_backward, sigmoid, softplus, Activation};
pub use conv::{
    conv2d, conv2d_backward, conv2d_batch, conv2d_batch_backward, conv_output_size, ConvGrads,
    ConvSpec,
};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{
    batchnorm2d, batchnorm2d_backward, layernorm, layernorm_backward, BatchNormCache,
    BatchNormStats, LayerNormCache, NormGrads, NormMode,
};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};
