use std::path::PathBuf;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: unresolved ids {ids:?}")]
    Dangling { ids: Vec<String> },

    #[error("validation error: parent cycle through {members:?}")]
    Cycle { members: Vec<String> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown id `{0}`")]
    Lookup(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("stale index: index built for parameters {index_hash}, model is {model_hash}")]
    StaleIndex { index_hash: String, model_hash: String },

    #[error("stage `{stage}` requires `{missing}` to run first")]
    Dependency { stage: String, missing: String },

    #[error("artifact {path} changed since stage `{stage}` produced it")]
    Staleness { stage: String, path: PathBuf },

    #[error("output directory is locked by another run ({0})")]
    Locked(PathBuf),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Dangling { .. } | Error::Cycle { .. } | Error::Validation(_) => "validation",
            Error::Lookup(_) => "lookup",
            Error::Argument(_) | Error::Dimension { .. } => "argument",
            Error::StaleIndex { .. } => "consistency",
            Error::Dependency { .. } => "dependency",
            Error::Staleness { .. } => "staleness",
            Error::Locked(_) => "locked",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
