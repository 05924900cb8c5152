//! Dense tensors, neural primitives and their adjoints.
//!
//! Every primitive comes as a forward function plus an explicit backward
//! function; layers compose them by replaying their forward order in
//! reverse.

pub mod gradcheck;
pub mod ops;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use param::{Buffer, Module, Parameter, LINEAR_GAIN, RELU_GAIN};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
