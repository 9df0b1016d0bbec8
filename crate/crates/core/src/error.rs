//! Error type shared by the compute core.

use alloc::string::String;
use core::fmt;

/// Errors raised by encoding, graph construction, training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration value (bad hyper-parameter, geometry, grid...).
    Config(String),
    /// Tensor shape mismatch between operands.
    Shape(String),
    /// Input data violates a documented invariant.
    Validation(String),
    /// Not enough event history to encode at the requested timestamp.
    InsufficientHistory {
        /// Earliest label timestamp that can be encoded.
        earliest_admissible_us: u64,
    },
    /// Not enough events for count-based stacking.
    InsufficientEvents {
        /// Events available before the requested timestamp.
        available: usize,
        /// Events required by the encoder configuration.
        required: usize,
    },
    /// A non-finite value surfaced where finite math is required.
    NonFinite(String),
    /// Training diverged; carries the last finite loss observed.
    Diverged { epoch: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::InsufficientHistory {
                earliest_admissible_us,
            } => write!(
                f,
                "insufficient history: earliest admissible label timestamp is {earliest_admissible_us} us"
            ),
            Error::InsufficientEvents {
                available,
                required,
            } => write!(
                f,
                "insufficient events: {available} available, {required} required"
            ),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (last loss {loss})")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
