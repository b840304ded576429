use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("iterate diverged at iteration {t}")]
    Divergence { t: usize },

    #[error("accumulator is empty")]
    EmptyAccumulator,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stepsize regime error: {0}")]
    Regime(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("degenerate sketch direction: {0}")]
    DegenerateDirection(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
