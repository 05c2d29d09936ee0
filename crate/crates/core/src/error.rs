use alloc::string::String;

use crate::envs::Token;

/// Errors reported by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("action {action} is out of range for a vocabulary of size {vocab_size}")]
    ActionOutOfRange { action: Token, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("index {index} is out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),

    #[error("enumeration needs {paths} paths, over the budget of {budget}")]
    BudgetExceeded { paths: u128, budget: u128 },

    #[error("policies are incompatible: {0}")]
    IncompatiblePolicies(&'static str),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
