use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the simulation and estimation routines.
///
/// Variants are split between bad input (caller error) and numerical
/// failure, so front ends can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(
        "quadrature did not converge: estimated error {achieved:e} exceeds tolerance {requested:e}"
    )]
    Quadrature { achieved: f64, requested: f64 },

    #[error("fit did not converge after {iterations} iterations (cost {cost:e})")]
    NoConvergence { iterations: usize, cost: f64 },

    #[error("fit is rank deficient: {0}")]
    RankDeficient(String),

    #[error("too few usable points: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("coherence fully collapsed: no decay constant recoverable")]
    FullyCollapsed,

    #[error("parameter unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("Magnus expression is singular at this spacing (|cos| = {0:e})")]
    Resonance(f64),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. }
                | Error::NoConvergence { .. }
                | Error::RankDeficient(_)
                | Error::InsufficientData { .. }
                | Error::FullyCollapsed
                | Error::Unidentifiable(_)
                | Error::Resonance(_)
        )
    }
}
