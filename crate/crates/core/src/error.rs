use thiserror::Error;

use crate::design::TreatmentCombination;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (factor counts, orders, option values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or non-finite input data.
    #[error("data error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Data { row: Option<usize>, message: String },

    /// The non-negligible effects cannot be recovered from the observed cells.
    #[error(
        "identification error: {reason} (unobserved: {})",
        fmt_combinations(unobserved)
    )]
    Identification {
        reason: String,
        unobserved: Vec<TreatmentCombination>,
    },

    /// The exact-balance problem has no nonnegative solution.
    #[error("balance constraints are infeasible (max residual {max_residual:.3e})")]
    Infeasible { max_residual: f64 },

    /// The dual solver stopped without meeting its tolerance.
    #[error(
        "solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("variance error: {0}")]
    Variance(String),

    #[error("baseline error: {0}")]
    Baseline(String),

    #[error("study error: {0}")]
    Study(String),
}

impl Error {
    pub(crate) fn data(row: usize, message: impl Into<String>) -> Self {
        Error::Data {
            row: Some(row),
            message: message.into(),
        }
    }
}

fn fmt_combinations(set: &[TreatmentCombination]) -> String {
    let parts: Vec<String> = set.iter().map(|z| z.to_string()).collect();
    format!("[{}]", parts.join(", "))
}
