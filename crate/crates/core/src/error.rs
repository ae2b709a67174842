use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    /// A filtered row became identically zero: the conditioning configuration
    /// has no support under the model.
    #[error("zero support for chain {chain} at step {step}")]
    ZeroSupport { chain: usize, step: usize },

    #[error("joint state space of block {block} has {states} states, above the budget of {budget}")]
    BudgetExceeded {
        block: usize,
        states: u128,
        budget: u128,
    },

    #[error("no support-consistent initial trajectory found after {0} attempts")]
    Initialization(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Invalid(_) => "invalid",
            Error::ZeroSupport { .. } => "zero_support",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::Initialization(_) => "initialization",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
