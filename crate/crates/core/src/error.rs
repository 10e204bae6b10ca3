use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bad input: dimensions, non-symmetric matrices, n < 5 and the like.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Coincident points where the pair potential is singular.
    #[error("domain error: {0}")]
    Domain(String),
    /// Hypotheses of the blow-up construction are violated (sign of the
    /// normal derivative, M_eps membership).
    #[error("regime error: {0}")]
    Regime(String),
    /// Quadrature, solver or eigensolver failure.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
