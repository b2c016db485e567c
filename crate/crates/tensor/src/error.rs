use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("reshape: cannot view {from:?} ({from_len} elements) as {to:?} ({to_len} elements)")]
    ElementCount { from: Vec<usize>, from_len: usize, to: Vec<usize>, to_len: usize },
    #[error("permute: {order:?} is not a permutation of 0..{rank}")]
    InvalidPermutation { order: Vec<usize>, rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: output extent along axis {axis} is not integral ({detail})")]
    ConvExtent { op: &'static str, axis: usize, detail: String },
    #[error("{op}: unsupported configuration ({detail})")]
    Unsupported { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
