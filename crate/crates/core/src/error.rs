use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::memory::Category;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A token or class index exceeded its bound.
    Index { what: &'static str, index: usize, bound: usize },
    /// A caller-side precondition was violated.
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// Non-finite input where finite values are required.
    Value { index: usize, value: f64 },
    /// Malformed serialized payload.
    Format(String),
    /// An allocation would exceed the device or host budget.
    Budget(BudgetError),
    /// Training diverged or produced a non-finite quantity.
    Training { step: u64, reason: String },
}

/// Budget breach with the ledger breakdown at the moment of refusal.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetError {
    pub category: Category,
    pub requested: u64,
    pub device_total: u64,
    pub device_budget: u64,
    pub host_total: u64,
    pub host_budget: u64,
    pub breakdown: Vec<(Category, u64)>,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Value { index, value } => {
                write!(f, "non-finite value {value} at element {index}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Budget(b) => write!(f, "{b}"),
            Error::Training { step, reason } => write!(f, "training aborted at step {step}: {reason}"),
        }
    }
}

impl fmt::Display for BudgetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "memory budget exceeded allocating {} bytes for {:?} (device {}/{} bytes, host {}/{} bytes)",
            self.requested,
            self.category,
            self.device_total,
            self.device_budget,
            self.host_total,
            self.host_budget
        )?;
        for (cat, bytes) in &self.breakdown {
            write!(f, "; {cat:?}={bytes}")?;
        }
        Ok(())
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
