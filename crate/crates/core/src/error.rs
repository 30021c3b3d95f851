use thiserror::Error;

use crate::semantics::Message;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("arm index {arm} out of range for {arms} arms")]
    ArmOutOfRange { arm: usize, arms: usize },

    #[error(
        "symmetric eigen-solver failed (dim {dim}, frobenius norm {frobenius:.3e}, \
         diagonal range [{diag_min:.3e}, {diag_max:.3e}]): {detail}"
    )]
    Numerical {
        dim: usize,
        frobenius: f64,
        diag_min: f64,
        diag_max: f64,
        detail: String,
    },

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("posterior sampling failed after {attempts} proposals ({accepted} accepted): {detail}")]
    Sampling {
        attempts: usize,
        accepted: usize,
        detail: String,
    },

    #[error("model outside the semantic map domain: {0}")]
    OutOfDomain(String),

    #[error("message {0} is not valid for this semantic map")]
    InvalidMessage(Message),

    #[error("agent type has no feasible arm")]
    NoFeasibleArm,

    #[error("arm {0} has no observations; UCB index undefined")]
    UninitializedArm(usize),

    #[error("infeasible warm-start plan: {0}")]
    InfeasiblePlan(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("threshold undefined: {0}")]
    UndefinedThreshold(String),

    #[error("unestimated primitive cells: {0:?}")]
    UnestimatedCells(Vec<(usize, Message)>),

    #[error("cover would need {needed} centers (cap {cap})")]
    CoverTooLarge { needed: f64, cap: usize },
}
