//! Crate-wide error type and the exit-code contract used by the CLI.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A tensor operation received incompatible shapes. `dim` names the
    /// offending dimension or axis.
    #[error("{op}: dimension `{dim}` mismatch: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },

    /// A label value outside `[0, num_classes)`, reported with its pixel
    /// coordinate.
    #[error("label {label} out of range (num_classes {num_classes}) at pixel (n={n}, y={y}, x={x})")]
    LabelRange {
        label: usize,
        num_classes: usize,
        n: usize,
        y: usize,
        x: usize,
    },

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or truncated file content (model files, PGM, manifests, CSV).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Non-finite values or other numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// API misuse independent of data values (e.g. backward from a
    /// non-scalar tensor).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 1 usage/config, 2 data/format,
    /// 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Shape { .. }
            | Error::LabelRange { .. }
            | Error::Format { .. }
            | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
