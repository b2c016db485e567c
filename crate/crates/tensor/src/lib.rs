//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Every operation needed by the segmentation model (elementwise math,
//! batched matmul, softmax, reductions, layout changes, layer norm, 3-D
//! convolution and its transpose) is an inherent method on [`Tensor`] that
//! records a backward rule when gradients are being tracked.

mod element;
mod error;
pub mod gradcheck;
mod kernels;
pub mod ops;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Probe};
pub use ops::{ConvGeometry, ReduceOp, DIFFERENTIABLE_OPS};
pub use tensor::{is_grad_enabled, no_grad, BackwardFn, NoGradGuard, Tensor};
