use thiserror::Error;

/// Errors produced by the numerical kernels, the verifier and the trainer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("vector has zero Euclidean norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be a finite positive number, got {0}")]
    InvalidTemperature(f64),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("invalid embedding batch: {0}")]
    InvalidBatch(String),
    #[error("similarity bound requires the PaperN anchor mode")]
    UnsupportedMode,
    #[error("invalid verification grid: {0}")]
    InvalidGrid(String),
    #[error("invalid dataset parameters: {0}")]
    InvalidDatasetParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
