use alloc::string::String;

/// Errors raised by the numerical core, the environment and the wire protocol.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward already called on this tape")]
    TapeConsumed,
    #[error("no gradients accumulated since the last update")]
    MissingGradients,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("episode: {0}")]
    Episode(&'static str),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(layer: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { layer, detail: detail.into() }
}
