use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("inner Riccati matrix R + B'SB is singular at step {0}")]
    SingularInnerMatrix(usize),

    #[error("program is infeasible: {0}")]
    Infeasible(String),

    #[error("numerical stall: {0}")]
    NumericalStall(String),

    #[error("iteration limit reached: {0}")]
    IterationLimit(String),

    #[error("k-update block {0} has no strictly feasible point")]
    BlockInfeasible(usize),

    #[error("relaxation parameter {0} outside (0, 2)")]
    InvalidGamma(f64),

    #[error("solution is not implementable at step {t}: SNR matrix has eigenvalue {min_eig:.3e}")]
    NotImplementable { t: usize, min_eig: f64 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error(
        "CCP converged to an infeasible trajectory (max slack {max_slack:.3e} at tau = {tau:.3e}); \
         restart with a different initial trajectory"
    )]
    ConvergedInfeasible {
        max_slack: f64,
        tau: f64,
        best: Box<crate::planner::CcpOutcome>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
