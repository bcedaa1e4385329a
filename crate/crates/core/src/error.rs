use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("canvas generation failed after {attempts} attempts (seed {seed:#018x})")]
    Generation { seed: u64, attempts: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {batch_seed:#018x})")]
    Diverged { epoch: usize, batch: usize, batch_seed: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
