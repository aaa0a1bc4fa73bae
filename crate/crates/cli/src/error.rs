use std::path::PathBuf;

use sketchloop_core::Error as CoreError;
use thiserror::Error;

/// Exit codes, one per failure family.
pub mod code {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const DATA: u8 = 4;
    pub const MODEL: u8 = 5;
    pub const TRAINING: u8 = 6;
    pub const SERVER: u8 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training failed: {0}")]
    Training(#[source] CoreError),

    #[error("server error: {0}")]
    Server(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps errors raised while optimising; data and I/O problems keep their own codes.
    pub fn from_training(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) | CoreError::State(_) => Self::Training(e),
            other => Self::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => code::USAGE,
            Self::Io { .. } => code::IO,
            Self::Training(_) => code::TRAINING,
            Self::Server(_) => code::SERVER,
            Self::Core(e) => match e {
                CoreError::Io { .. } => code::IO,
                CoreError::Validation(_)
                | CoreError::MissingSlots(_)
                | CoreError::Ingest(_)
                | CoreError::ImageDecode(_)
                | CoreError::DegenerateCombination => code::DATA,
                CoreError::NonFinite(_) => code::TRAINING,
                CoreError::Dimension { .. }
                | CoreError::EmptySequence
                | CoreError::State(_)
                | CoreError::Config(_)
                | CoreError::Conflict(_)
                | CoreError::Checkpoint(_)
                | CoreError::Backend { .. } => code::MODEL,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_family() {
        let cases = [
            CliError::Usage("x".into()).exit_code(),
            CliError::io("p", std::io::Error::other("x")).exit_code(),
            CliError::Core(CoreError::Validation("x".into())).exit_code(),
            CliError::Core(CoreError::Checkpoint("x".into())).exit_code(),
            CliError::from_training(CoreError::NonFinite("x".into())).exit_code(),
            CliError::Server("x".into()).exit_code(),
        ];
        let unique: std::collections::BTreeSet<u8> = cases.iter().copied().collect();
        assert_eq!(unique.len(), cases.len());
        assert!(cases.iter().all(|&c| c != 0 && c != 1));
    }
}
