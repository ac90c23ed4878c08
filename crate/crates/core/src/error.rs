use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{context}: expected dimension {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("state became non-finite at time step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite {what} at iteration {iteration}{}", inner_step.map(|k| format!(", inner step {k}")).unwrap_or_default())]
    Diverged {
        what: &'static str,
        iteration: usize,
        inner_step: Option<usize>,
    },

    #[error("gradient for parameter tensor {index} contains NaN or infinity")]
    NonFiniteGradient { index: usize },

    #[error("problem `{0}` has no explicit running cost; use the F-form solver")]
    MissingExplicitCost(String),

    #[error("{map}: |{function}(x_{component})| = {value:e} is below the singularity guard")]
    Singularity {
        map: &'static str,
        function: &'static str,
        component: usize,
        value: f64,
    },

    #[error("inner maximization stopped after {iterations} iterations with residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("Riccati integration diverged: max |K| = {norm:e} after {step} steps")]
    RiccatiDivergence { norm: f64, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("aggregate of an empty set of runs")]
    EmptyAggregate,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Dimension { .. } => "dimension",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::MissingExplicitCost(_) => "missing_explicit_cost",
            Error::Singularity { .. } => "singularity",
            Error::NonConvergence { .. } => "non_convergence",
            Error::RiccatiDivergence { .. } => "riccati_divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyAggregate => "empty_aggregate",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
