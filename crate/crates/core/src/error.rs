use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Paramagnetic,
    PairRetrieval,
    Condensed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Paramagnetic => write!(f, "paramagnetic, m1=m2=0"),
            Phase::PairRetrieval => write!(f, "pair retrieval, m1=m2"),
            Phase::Condensed => write!(f, "condensed phase"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("state space 2^{bits} exceeds the enumeration cap 2^{cap}")]
    TooLarge { bits: usize, cap: usize },
    #[error("outside the solver's domain: {0}")]
    Phase(Phase),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
