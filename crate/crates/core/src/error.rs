use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("needle outside frame")]
    NeedleOutsideFrame,

    #[error("no valid ROI region")]
    NoValidRoiRegion,

    #[error("AUROC undefined: labels contain a single class")]
    AurocUndefined,

    #[error("metric undefined: labels contain a single class")]
    SingleClass,

    #[error("non-finite loss during {stage} (component `{component}`) at step {step}")]
    NonFiniteLoss {
        stage: &'static str,
        component: String,
        step: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("malformed tensor file {path}: {reason}")]
    TensorFile { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
