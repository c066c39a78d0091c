use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OscarError>;

#[derive(Debug, Error)]
pub enum OscarError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:.3e})")]
    Convergence { sweeps: usize, off_diagonal: f64 },

    #[error("activation dump is empty: {0}")]
    EmptyDump(String),

    #[error("candidate grid is empty")]
    EmptyGrid,

    #[error("cannot normalize a fully masked softmax row")]
    FullyMasked,

    #[error("invalid container: {0}")]
    Format(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl OscarError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        OscarError::Dimension(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        OscarError::ShapeMismatch(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        OscarError::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        OscarError::Format(msg.into())
    }
}
