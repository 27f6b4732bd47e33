use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid attribute for {op}: {detail}")]
    InvalidAttr { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not attached to the gradient tape")]
    DetachedLoss,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("logit cache inconsistent with dataset: {0}")]
    CacheMismatch(String),

    #[error("no cached teacher logits for sample {0}")]
    CacheMiss(usize),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Coarse failure class, used for process exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidAttr { .. } => "shape",
            Error::NonScalarLoss(_) | Error::DetachedLoss | Error::NonFinite(_) => "numeric",
            Error::InvalidArgument(_) | Error::UnknownVariant(_) | Error::Config { .. } => "config",
            Error::CorruptFile(_) | Error::CacheMismatch(_) | Error::CacheMiss(_) => "data",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
