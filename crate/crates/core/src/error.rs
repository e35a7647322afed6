//! Error type shared across the crate.
//!
//! Recoverable conditions (bad config, solver breakdowns, degenerate
//! covariances, file-format problems) are reported through [`Error`].
//! Shape mismatches between tensors inside hot loops are programmer
//! errors and panic via `assert!` instead.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// One-line training-history record: `(iteration, learning rate, loss)`.
pub type HistoryRow = (usize, f64, f64);

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (non-positive Δt, unknown kind, …).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Length/shape mismatch at a public API boundary.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A NaN or infinity appeared where finite arithmetic was required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Covariance matrix failed Cholesky even at the maximum jitter.
    #[error("degenerate kernel: covariance not positive definite at jitter {max_jitter:e}")]
    DegenerateKernel { max_jitter: f64 },

    /// Rejection sampling could not produce enough admissible draws.
    #[error("sampling exhausted: {accepted}/{requested} accepted after {attempts} attempts")]
    SamplingExhausted {
        requested: usize,
        accepted: usize,
        attempts: usize,
    },

    /// An iterative solver (Newton, linear solve) failed to converge.
    #[error("solver failure in {context}: residual {residual:e} after {iterations} iterations")]
    Solver {
        context: String,
        iterations: usize,
        residual: f64,
    },

    /// Least-squares/LM refit did not meet its tolerances; carries the best iterate.
    #[error("refit did not converge in {context}: cost {cost:e} after {iterations} iterations")]
    Convergence {
        context: String,
        iterations: usize,
        cost: f64,
        best: Vec<f64>,
    },

    /// Training loss blew up; carries the recorded history up to the failure.
    #[error("training diverged at iteration {iteration}: loss {loss:e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        history: Vec<HistoryRow>,
    },

    /// Rollout produced an unusable state.
    #[error("rollout failed at step {step}: {context}")]
    Rollout { step: usize, context: String },

    /// Binary file-format violation (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
