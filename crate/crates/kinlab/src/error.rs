//! Error taxonomy. Configuration problems, numerical failures and internal
//! invariant breaches stay distinguishable so callers can map them to
//! different exit paths.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad input: inconsistent model parameters, malformed grids, option
    /// values outside their documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation failed numerically: positivity loss, CFL violation,
    /// quadrature that refuses to converge, a singular solve.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An internal invariant did not hold. Always a bug, never user error.
    #[error("invariant breach: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
