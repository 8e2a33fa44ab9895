//! Dense row-major tensors with tape-free reverse-mode autodiff.
//!
//! Every [`Tensor`] owns (or shares) a contiguous buffer whose allocation is
//! charged to a per-thread [`meter`]. The meter plays the role of an
//! accelerator allocator: host-side data (plain `Vec`s) is never charged, so
//! code that stages results off the "device" shows up in the high-water mark
//! exactly the way it would on a GPU.

mod autograd;
mod dtype;
pub mod meter;
mod ops;
mod storage;
mod tensor;

pub use autograd::{backward, backward_from, grad_enabled, no_grad, Gradients};
pub use dtype::{DType, Elem};
pub use tensor::Tensor;
