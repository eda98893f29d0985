use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line @ line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("missing field: {field} @ line {line}")]
    MissingField { field: &'static str, line: usize },

    #[error("invalid field: {field} @ line {line}: {message}")]
    InvalidField {
        field: &'static str,
        line: usize,
        message: String,
    },

    #[error("cluster {0} has an empty gold summary")]
    EmptyGold(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("singular policy-evaluation system: {0}")]
    Singular(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint/vocab mismatch: checkpoint expects vocab {checkpoint}, vocab file hashes to {vocab}")]
    VocabMismatch { checkpoint: String, vocab: String },

    #[error("id mismatch between summaries and corpus: {0:?}")]
    IdMismatch(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }
}
