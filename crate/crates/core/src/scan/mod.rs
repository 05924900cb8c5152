//! Cross-modal 2-D selective scan.
//!
//! Two `[C, H, W]` feature maps are flattened along four traversal orders
//! into RGB/thermal interleaved token sequences. Each direction projects its
//! tokens to input-dependent `B`, `C` and step sizes, discretizes, and runs a
//! recurrence in which each modality's hidden state is advanced from the other
//! modality's state. The per-direction outputs are un-permuted and summed.

mod block;
mod element;
mod kernel;
mod layout;
mod params;
mod project;
mod sequence;

pub use block::{
    cross_modal_recurrence, cross_modal_recurrence_par, cross_modal_recurrence_seq, merge_scans,
    recurrence_backward, CmSs2d, CmSs2dCache, CmSs2dGrads, DirectionCache, DirectionGrads,
    RecurrenceGrads,
};
pub use element::{inclusive_scan, AffinePairElement, Parity};
pub use kernel::{
    kernel_registry, recurrence_kernel, BlellochScan, KernelFactory, RecurrenceInputs,
    RecurrenceKernel, SequentialScan,
};
pub use layout::{Direction, DirectionalLayout};
pub use params::{RecurrenceMode, SsmConfig, SsmDirectionParams};
pub use project::{
    discretize, project_backward, project_parameters, project_tokens, Projection, ProjectionGrads,
};
pub use sequence::{
    build_directional_sequences, deinterleave_accumulate, InterleavedSequence, Modality,
};
