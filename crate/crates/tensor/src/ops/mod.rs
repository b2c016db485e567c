//! Differentiable operations, implemented as inherent methods on
//! [`Tensor`](crate::Tensor).

pub mod conv;
mod elementwise;
mod layout;
mod matmul;
mod norm;
mod reduce;
mod softmax;

pub use conv::ConvGeometry;
pub use reduce::ReduceOp;

/// Tags of every operation with a backward rule.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "leaky_relu",
    "log",
    "exp",
    "matmul",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max",
    "reshape",
    "permute",
    "narrow",
    "concat",
    "add_bias",
    "layernorm",
    "conv3d",
    "deconv3d",
];
