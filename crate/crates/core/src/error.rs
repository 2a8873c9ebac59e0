use std::fmt;

/// Constraint of the bit-allocation program that no assignment can satisfy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Infeasibility {
    /// Target sum lies outside `[n, 3n]`.
    BudgetOutOfRange { n: usize, target: u32 },
    /// Budget reachable, but not while keeping one 3-bit and one 2-bit expert.
    Floors { n: usize, target: u32 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::BudgetOutOfRange { n, target } => write!(
                f,
                "budget constraint: sum of bits = {target} is outside [{}, {}] for {n} experts",
                n,
                3 * n
            ),
            Infeasibility::Floors { n, target } => write!(
                f,
                "floor constraint: no assignment of {n} experts summing to {target} bits \
                 contains at least one 3-bit and one 2-bit expert"
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("infeasible allocation: {0}")]
    Infeasible(Infeasibility),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("digest mismatch: {0}")]
    Digest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Argument(_) | Error::Digest(_) => 2,
            Error::Infeasible(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
