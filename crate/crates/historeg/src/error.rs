//! Crate-wide error type and the exit-code policy used by the CLI.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter vector for the {kind} stage must have {expected} entries, got {got}")]
    ParamLen {
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate transform: {0}")]
    Degenerate(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    ImageFile { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 2 for data problems (missing or
    /// malformed inputs, empty masks, stage-order violations), 3 for numerical
    /// failures. Usage errors exit 1 before any `Error` is constructed.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_)
            | Error::Degenerate(_)
            | Error::Solve(_)
            | Error::Optimization(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_data_from_numerical() {
        assert_eq!(Error::MissingInput(PathBuf::from("x")).exit_code(), 2);
        assert_eq!(Error::EmptyMask("m".into()).exit_code(), 2);
        assert_eq!(
            Error::StageMismatch {
                expected: "affine".into(),
                found: "tps".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(Error::Solve("singular".into()).exit_code(), 3);
        assert_eq!(Error::NonFinite("theta".into()).exit_code(), 3);
    }
}
