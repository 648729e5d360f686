use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid transform: scale must be > 0, got {0}")]
    InvalidScale(f64),

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("stale backprop cache: model generation {model}, cache generation {cache}")]
    StaleCache { model: u64, cache: u64 },

    #[error("unknown class id {class_id} (model has {classes} classes)")]
    UnknownClass { class_id: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("{0}")]
    InvalidInput(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("version mismatch in {what}: expected {expected}, found {found}")]
    VersionMismatch {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
