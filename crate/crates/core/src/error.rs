use thiserror::Error;

use crate::timegrid::PathRole;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{what} = {value} is not an integer multiple of the step {step}")]
    Divisibility {
        what: &'static str,
        value: f64,
        step: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} is outside the {role:?} path")]
    Range { role: PathRole, index: isize },

    #[error("Riccati recursion diverged at node {node} (sup norm {norm:e})")]
    RiccatiDivergence { node: usize, norm: f64 },

    #[error("Picard iteration stopped after {iterations} iterations with residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("numeric blow-up at node {node}")]
    BlowUp { node: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("model does not have the required structure: {0}")]
    Structure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Error {
    Error::Dimension {
        what: what.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
