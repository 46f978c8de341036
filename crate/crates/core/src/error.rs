//! Error type shared across the crate.
//!
//! One enum with focused variants instead of per-module error types: the
//! training pipeline threads tensors, encoders, files and configs through a
//! single call chain, and callers almost always want to bubble the error up
//! with context rather than match on module origin.

use std::fmt;
use std::io;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shapes disagree for an operation (matmul inner dims, elementwise ops).
    Shape(String),
    /// Bad input data: empty caption, clip shorter than one analysis window,
    /// sample-rate mismatch between clips being mixed, and similar.
    Input(String),
    /// A parameter value is outside its documented domain (gain <= 0,
    /// wet outside [0, 1], zero-length alpha grid, ...).
    Parameter(String),
    /// Configuration is inconsistent or incomplete (unknown keys, a transform
    /// registered without a caption rule, single-class corpus with mixing
    /// enabled, checkpoint/config hash mismatch).
    Config(String),
    /// A binary artifact failed to parse. Carries the byte offset where
    /// decoding gave up, when it is known.
    Format { message: String, offset: Option<u64> },
    /// Numeric breakdown: NaN where a finite value is required, divergence
    /// during optimization, a zero-norm vector that must be normalized.
    Numeric(String),
    /// A fixed capacity was exceeded (requested pooled length > q_max).
    Capacity(String),
    /// An API contract was violated by the caller (backward on a non-scalar,
    /// composing a caption with itself).
    Contract(String),
    /// The external caption service failed after retries.
    Service(String),
    /// Underlying I/O failure, annotated with the path that was touched.
    Io { path: String, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Input(m) => write!(f, "invalid input: {m}"),
            Error::Parameter(m) => write!(f, "invalid parameter: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Format { message, offset } => match offset {
                Some(o) => write!(f, "format error at byte {o}: {message}"),
                None => write!(f, "format error: {message}"),
            },
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Capacity(m) => write!(f, "capacity exceeded: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Service(m) => write!(f, "caption service error: {m}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Wrap an [`io::Error`] with the path that produced it.
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Format error at a known byte offset.
    pub fn format_at(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { message: message.into(), offset: Some(offset) }
    }

    /// Format error without a meaningful offset.
    pub fn format(message: impl Into<String>) -> Self {
        Error::Format { message: message.into(), offset: None }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
