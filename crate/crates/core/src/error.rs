use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max asymmetry {max_asym:e}")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix is not positive definite (jitter ladder exhausted at {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("layer norm input has degenerate variance {var:e}")]
    DegenerateVariance { var: f64 },
    #[error("direction vector has zero infinity norm")]
    ZeroDirection,
    #[error("scale factor must be positive, got {k}")]
    NonPositiveScale { k: f64 },
    #[error("target label {label} out of range for {classes} classes")]
    InvalidTarget { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("solver did not converge after {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("group {group} has vanishing norm; precision pinned at clamp")]
    DegenerateGroup { group: String },
    #[error("standard deviation must be nonnegative, got {sigma}")]
    NegativeStdDev { sigma: f64 },
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX file: needed {needed} bytes, had {had}")]
    TruncatedFile { needed: usize, had: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
