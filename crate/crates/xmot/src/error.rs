//! Crate-wide error type.
//!
//! File-format problems get distinct variants (bad magic, truncation, version
//! mismatch) because the CLI maps them to a dedicated exit code and tests
//! assert on the specific failure, not just "something went wrong".

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid argument (empty sequence, zero chunk size,
    /// mismatched shapes, out-of-range timestep, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training loss diverged; carries the step and batch description.
    #[error("non-finite loss at step {step} (batch {batch}): training aborted")]
    NonFiniteLoss { step: usize, batch: String },

    /// File does not start with the expected four-byte magic.
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// File ended before the declared payload was read.
    #[error("{path}: truncated, needed {needed} bytes but only {got} available")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },

    /// File declares a format version this build does not speak.
    #[error("{path}: unsupported format version {found}, expected {expected}")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },

    /// Header fields are internally inconsistent or out of range.
    #[error("{path}: invalid header: {reason}")]
    InvalidHeader { path: String, reason: String },

    /// Checkpoint content disagrees with its manifest or the requested config.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Malformed config file or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors that mean "the input file is malformed" as opposed to
    /// missing or unreadable; the CLI maps these to exit code 65.
    pub fn is_format_violation(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::VersionMismatch { .. }
                | Error::InvalidHeader { .. }
        )
    }

    /// True when the underlying cause is a missing file; exit code 66.
    pub fn is_not_found(&self) -> bool {
        matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
