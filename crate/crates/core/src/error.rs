use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RpgError {
    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),
    /// A sampled (or evaluated) outcome has zero mass under the sampling measure.
    #[error("outcome {outcome} has zero support under the reference measure")]
    ZeroSupportSample { outcome: usize },
    /// A log-ratio numerator has mass where the denominator has none.
    #[error("support violation at outcome {outcome}")]
    SupportError { outcome: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("outcome {outcome} out of range for a space of size {n}")]
    OutcomeOutOfRange { outcome: usize, n: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
}

pub type Result<T> = std::result::Result<T, RpgError>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(RpgError::DimensionMismatch { expected, found })
    }
}
