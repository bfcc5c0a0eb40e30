use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors split into configuration problems (bad inputs, violated
/// preconditions) and numerical failures encountered while running.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rejection sampling failed: {0} consecutive rejections (trunc_r2 incompatible with mu_x, sigma_x)")]
    RejectionFailure(u64),

    #[error("empirical Hessian is not positive definite ({0})")]
    HessianNotSpd(String),

    #[error("Newton solver did not reach tolerance {tol} after {iters} iterations (last gradient norm {grad_norm})")]
    NoConvergence {
        iters: usize,
        tol: f64,
        grad_norm: f64,
    },

    #[error("blended PPI Hessian not positive definite for lambda = {0}")]
    InvalidLambda(f64),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    /// True for errors that indicate a bad configuration rather than a
    /// numerical failure at runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension(_))
    }
}
