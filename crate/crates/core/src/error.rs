use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("backward requires a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("pyramid mismatch: {0}")]
    PyramidMismatch(String),
    #[error("distillation plan is in mode {actual}, expected {expected}")]
    WrongMode {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("bad scene spec: {0}")]
    BadSpec(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("no evaluated ground truth")]
    NoGroundTruth,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
