//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps error kinds to
//! process exit codes (config -> 2, numeric -> 3, io/compat -> 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown label {label:?} not in vocabulary")]
    UnknownLabel { label: String },

    #[error("tree exceeds capacity: node at depth {depth} > max depth {max_depth}")]
    DepthOverflow { depth: usize, max_depth: usize },

    #[error("invalid role path {path:?}: {reason}")]
    InvalidPath { path: String, reason: String },

    #[error("ambiguous decode at path {path:?}: norm {norm:.4} above empty threshold but best cosine {best_cosine:.4} below match threshold")]
    AmbiguousDecode {
        path: String,
        norm: f64,
        best_cosine: f64,
    },

    #[error("decoded bindings do not form a binary tree: {0}")]
    MalformedTree(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("invalid program: {0}")]
    InvalidProgram(String),

    #[error("s-expression parse error: {0}")]
    SexprParse(String),

    #[error("dataset parse error at line {line}: {reason}")]
    DatasetParse { line: usize, reason: String },

    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("tape already consumed by backward; build a fresh tape")]
    TapeConsumed,

    #[error("numeric health failure: {0}")]
    NumericHealth(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint incompatible with dataset: {0}")]
    Incompatible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidProgram(_)
            | Error::DepthOverflow { .. }
            | Error::InvalidPath { .. }
            | Error::UnknownLabel { .. } => 2,
            Error::NumericHealth(_) | Error::TapeConsumed | Error::ShapeMismatch { .. } => 3,
            _ => 4,
        }
    }
}
