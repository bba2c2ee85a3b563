// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    UnknownToken { token: u32, vocab: usize },

    #[error("sequence of {len} positions exceeds max_seq {max_seq}")]
    SequenceOverflow { len: usize, max_seq: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parameters are frozen: {0}")]
    Frozen(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("content hash mismatch for {path}: stored {stored}, computed {computed}")]
    HashMismatch {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("refusing to overwrite {0} (pass --force)")]
    AlreadyExists(PathBuf),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::UnknownToken { .. } => "unknown_token",
            Error::SequenceOverflow { .. } => "sequence_overflow",
            Error::Empty(_) => "empty",
            Error::Frozen(_) => "frozen",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::AlreadyExists(_) => "already_exists",
            Error::Mismatch(_) => "mismatch",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
