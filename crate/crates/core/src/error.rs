use thiserror::Error;

/// Errors produced anywhere in the allocation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An input violated a documented invariant. `field` names the offender.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    /// A function was evaluated outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed structured document.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// The dual search did not reach the budget tolerance.
    #[error(
        "solver did not converge after {iterations} iterations: \
         lambda in [{lambda_lo:e}, {lambda_hi:e}], budget residual {residual:e}"
    )]
    NotConverged {
        iterations: usize,
        lambda_lo: f64,
        lambda_hi: f64,
        residual: f64,
    },

    /// A guarded computation would exceed its configured size limit.
    #[error("resource limit exceeded: {requested} > {limit}")]
    ResourceLimit { requested: u128, limit: u128 },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short stable identifier of the error class, used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Domain(_) => "domain",
            Error::Parse { .. } => "parse",
            Error::NotConverged { .. } => "not_converged",
            Error::ResourceLimit { .. } => "resource_limit",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
