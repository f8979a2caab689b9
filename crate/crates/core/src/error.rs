use thiserror::Error;

/// Errors raised by the transport, kernel and estimation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("negative total mass {0}")]
    NegativeMass(f64),

    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("support violation at index {index}: p > 0 while q = 0")]
    SupportViolation { index: usize },

    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,

    #[error("infeasible starting point: {0}")]
    InfeasibleStart(String),

    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    #[error("total masses differ: {source_mass} vs {target_mass}")]
    MassMismatch { source_mass: f64, target_mass: f64 },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("class {class} has no training examples")]
    EmptyClass { class: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
