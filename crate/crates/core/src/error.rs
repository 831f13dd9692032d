use alloc::string::String;
use alloc::vec::Vec;

/// Errors reported by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity exceeded: {needed} segments but only {available} proposal slots")]
    Capacity { needed: usize, available: usize },
    #[error("zero-shot protocol violation: {0}")]
    Protocol(String),
    #[error("generation failed for sample {index}: {reason}")]
    Generation { index: usize, reason: String },
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
