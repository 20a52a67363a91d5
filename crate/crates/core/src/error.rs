use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: expected input of length {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("weight vector has {got} entries, shape table requires {expected}")]
    WeightLengthMismatch { expected: usize, got: usize },

    #[error("cannot normalize the zero vector")]
    ZeroVector,

    #[error("loss derivative undefined below q0={q0} (got q={q})")]
    LossDomain { q: f64, q0: f64 },

    #[error("batch size {n_b} exceeds dataset size {n}")]
    BatchTooLarge { n_b: usize, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite weights at iteration {k}; last finite state: norm={norm}, margin={margin}")]
    NumericalAbort { k: u64, norm: f64, margin: f64 },

    #[error("gradient check failed: euler={euler:.3e}, homogeneity={homog:.3e}, finite-diff={fd:.3e}")]
    GradCheckFailed { euler: f64, homog: f64, fd: f64 },

    #[error("margin is not positive ({margin}); rescaled KKT point is undefined")]
    NonPositiveMargin { margin: f64 },

    #[error("analysis window [{lo}, {hi}] starts before separation (k_sep={k_sep})")]
    WindowBeforeSeparation { lo: u64, hi: u64, k_sep: u64 },

    #[error("no separation detected in trajectory")]
    NoSeparation,

    #[error("rejection sampling failed after {attempts} draws (margin too large?)")]
    RejectionFailure { attempts: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
