//! Error type shared across the crate.
//!
//! Variants are grouped so a caller (the CLI in particular) can map them to
//! distinct exit codes: configuration, data/format, numeric failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape-incompatible operands; names the operation and both shapes.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument for `{op}`: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A NaN or Inf surfaced in a gradient or loss; the step must abort
    /// rather than let divergence propagate silently.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("zero-norm vector passed to `{op}`; direction is undefined")]
    ZeroNorm { op: &'static str },

    #[error("gradient map is missing parameters: {names:?}")]
    MissingGradients { names: Vec<String> },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {path}: {msg}")]
    Data { path: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint lacks parameter groups required by the requested regime.
    #[error("regime `{regime}` requires parameter groups {missing:?} absent from the checkpoint")]
    RegimeMismatch {
        regime: String,
        missing: Vec<String>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
