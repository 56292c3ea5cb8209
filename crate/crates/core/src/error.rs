use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum LoocError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("dimension {dim} is not divisible by {m}")]
    IndivisibleDimension { dim: usize, m: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("cosine metric undefined for a zero-norm vector")]
    ZeroVectorCosine,
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("shape {h}x{w} is not divisible by beta={beta}")]
    IndivisibleShape { h: usize, w: usize, beta: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window size {window} too large for {h}x{w} image")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("code grids disagree on m or K")]
    InconsistentGrids,
    #[error("truncated stream: need {needed} bytes, have {available}")]
    TruncatedStream { needed: usize, available: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel data: need {needed} bytes, have {available}")]
    TruncatedPixels { needed: usize, available: usize },
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LoocError>;
