use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not orthogonal (max |RᵀR - I| = {0:e})")]
    NotOrthogonal(f64),

    #[error("invalid denoiser: {0}")]
    InvalidSpec(String),

    #[error("{labels} atom labels for {atoms} atoms")]
    LabelMismatch { labels: usize, atoms: usize },

    #[error("xtb executable not found: {}", .0.display())]
    ExecutableMissing(PathBuf),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
