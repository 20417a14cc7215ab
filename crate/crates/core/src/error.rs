use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("point ({tau}, {x}) lies outside the domain")]
    Domain { tau: f64, x: f64 },

    #[error("stencil around ({tau}, {x}) leaves the closed domain")]
    Margin { tau: f64, x: f64 },

    #[error("poisoned gradient at iteration {iteration}{}", .function.map(|f| format!(" (source function {f})")).unwrap_or_default())]
    PoisonedGradient {
        iteration: u64,
        function: Option<usize>,
    },

    #[error("matrix is not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("singular tridiagonal system: zero pivot at row {row}")]
    Singular { row: usize },

    #[error("Newton iteration did not converge at time step {step}")]
    Nonconvergence { step: usize },

    #[error("finite-difference solution diverged at time step {step}")]
    Divergence { step: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
