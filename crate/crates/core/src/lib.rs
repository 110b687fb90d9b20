//! Kernel cluster pruning for convolutional networks.
//!
//! Each pruning epoch computes, per conv layer, the mean kernel (the layer's
//! cluster center), measures every kernel's distance to it and zeroes the
//! kernels closest to the center. Tensor shapes never change; sparsity lives
//! in zeroed kernel slices tracked by [`kcp::KernelMask`]s.

pub mod ckpt;
pub mod data;
pub mod distill;
pub mod error;
pub mod kcp;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, ErrorClass, IdxError, Result};
pub use kcp::{Criteria, FinetuneMode, KernelIndex, KernelMask, MaskSet, PruneConfig, PruneState};
pub use nn::{ModelGraph, ModelState};
pub use tensor::{Element, Tensor};
