use thiserror::Error;

/// Errors reported by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model has no explicit right-hand side")]
    ImplicitOnly,
    #[error("unsupported number of collocation stages: {0}")]
    UnsupportedStages(usize),
    #[error("Newton iteration did not converge in {0}")]
    NewtonFailure(&'static str),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("QP is infeasible")]
    QpInfeasible,
    #[error("QP solver hit the iteration limit ({0})")]
    QpMaxIterations(usize),
    #[error("QP working-set KKT matrix is singular")]
    QpDegenerate,
    #[error("active constraint rows are linearly dependent")]
    Licq,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("divergence at iteration {iter}: residual {residual:e}")]
    Divergence { iter: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
