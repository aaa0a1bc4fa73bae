use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One failed manifest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} (id {id}): {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("attention over an empty key/value sequence")]
    EmptySequence,

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("adapter already attached to {0}")]
    Conflict(String),

    #[error("degenerate combination: text and image embeddings sum to the zero vector")]
    DegenerateCombination,

    #[error("template is missing values for slot(s): {}", .0.join(", "))]
    MissingSlots(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("manifest ingestion failed with {} error(s):\n{}", .0.len(), join_records(.0))]
    Ingest(Vec<RecordError>),

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generator backend failed at iteration {iteration}: {message}")]
    Backend { iteration: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_records(records: &[RecordError]) -> String {
    records
        .iter()
        .map(|r| format!("  {r}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
