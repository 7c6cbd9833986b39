use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("projection degenerate: joint {joint} has depth {depth}")]
    ProjectionDegenerate { joint: usize, depth: f64 },

    #[error("alignment degenerate: reference pose has zero variance")]
    AlignmentDegenerate,

    #[error("cannot normalize an all-zero pose vector (index {0})")]
    ZeroNorm(usize),

    #[error("non-finite loss value {0}")]
    GradientInvalid(f64),

    #[error("parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
