use std::path::PathBuf;

/// Errors raised by the tensor engine, the models and the training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error at step {position}: id {id} out of range (limit {limit})")]
    Index {
        position: usize,
        id: usize,
        limit: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("token {token} outside the expected range {start}..{end}")]
    Range { token: u32, start: u32, end: u32 },

    #[error("degenerate summary: the summarizer emitted EOS at the first step")]
    DegenerateSummary,

    #[error("missing prerequisite {path}: run `{command}` first")]
    MissingPrerequisite { path: PathBuf, command: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
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
