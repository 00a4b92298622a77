use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Failure modes surfaced by the public operations.
///
/// The variants form a fixed taxonomy: callers (the CLI in particular) map
/// them onto exit codes, so new failure kinds should reuse an existing
/// variant where one fits rather than grow the enum.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Mismatched or invalid tensor/mask shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (bad ratio, even kernel, unstable dt, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Argument outside an operation's mathematical domain (e.g. t = 0 where
    /// a division by sigma_t is required).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated: wrong operand role, wrong call order.
    #[error("contract error: {0}")]
    Contract(String),

    /// A mask with no observed entries where at least one is required.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// Rejection sampling against a conditioning event whose acceptance
    /// rate is too small to estimate anything.
    #[error("infeasible conditioning: {0}")]
    InfeasibleConditioning(String),

    /// Numerical failure: singular system, non-finite intermediate.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training loss became non-finite; carries the offending step.
    #[error("training diverged at step {step}: {message}")]
    TrainingDivergence { step: u64, message: String },

    /// PDE generation failed (instability, blow-up).
    #[error("generation error: {0}")]
    Generation(String),

    /// Requested setting cannot be satisfied (e.g. adaptive context ratio
    /// above one).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed binary container or checkpoint.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON metadata (manifests, configs, reports).
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
