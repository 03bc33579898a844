//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("load error: {0}")]
    Load(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("shuffle budget not reached after {max_ops} ops (fraction {fraction:.4})")]
    ShuffleBudget { max_ops: usize, fraction: f64 },
    #[error("mask too sparse: {got} vessel pixels, need at least {need}")]
    SparseMask { got: usize, need: usize },
    #[error("metrics undefined: no {0} pixels in evaluation set")]
    EmptyClass(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iter}: {what} is not finite")]
    NonFinite { iter: usize, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;
