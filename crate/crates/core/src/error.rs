use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its valid range.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The occupation string has no decomposition into squeezed/unsqueezed blocks.
    #[error("occupation {0} is not in the squeezed subspace")]
    NotInSqueezedSubspace(String),

    /// Matrix elements are only defined for k > |m|.
    #[error("V_{{k,m}} requires k > |m|, got k = {k}, m = {m}")]
    DomainViolation { k: i64, m: i64 },

    #[error("momentum sector K = {0} is empty")]
    EmptySector(i64),

    #[error("basis mismatch: expected {expected}, found {found}")]
    BasisMismatch { expected: String, found: String },

    /// The metric tensor is not symmetric, unimodular and positive definite.
    #[error("invalid metric tensor: {0}")]
    InvalidMetric(String),

    /// The bimetric right-hand side was evaluated at sinh Q = 0 without the series fallback.
    #[error("bimetric equations are singular at Q = {0:e}")]
    SingularPoint(f64),

    #[error("integration produced a non-finite state at t = {0}")]
    NonFinite(f64),

    #[error("iterative solver did not converge (residual {residual:e} after {iterations} iterations)")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("least-squares system is rank deficient: {0}")]
    RankDeficient(String),

    #[error("no samples left after post-selection")]
    EmptyCounts,

    #[error("too many qubits for statevector simulation: {0}")]
    QubitOverflow(usize),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<argmin::core::Error> for Error {
    fn from(e: argmin::core::Error) -> Self {
        Error::Optimizer(e.to_string())
    }
}
