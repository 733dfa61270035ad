use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },

    #[error("unbound graph input `{0}`")]
    Unbound(String),

    #[error("seed node {node} is not scalar (shape {shape:?})")]
    NonScalarSeed { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("unsupported version {found} in {what} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("missing labels: {0}")]
    MissingLabels(String),

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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user data or configuration (as opposed to
    /// a numerical failure inside the engine).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Format { .. }
                | Error::Checksum { .. }
                | Error::Version { .. }
                | Error::MissingLabels(_)
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::InvalidArgument(_)
        )
    }
}
