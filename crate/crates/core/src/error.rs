use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint parameter mismatch: missing [{}], unexpected [{}], shape mismatches [{}]",
        .missing.join(", "), .unexpected.join(", "), .shape_mismatch.join(", "))]
    ParamMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
        shape_mismatch: Vec<String>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
