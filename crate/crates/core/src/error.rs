use thiserror::Error;
use unetrpp_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { kind, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
