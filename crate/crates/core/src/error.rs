use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("synthesized sketch stayed degenerate after {attempts} attempts")]
    DegenerateSketch { attempts: usize },

    #[error("sketch does not enclose a region")]
    OpenContour,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("ground truth has zero dynamic range")]
    DegenerateRange,

    #[error("input is not binary (found value {0})")]
    NonBinary(f64),

    #[error("{window}x{window} window does not fit a {width}x{height} image")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("need at least {min} records, got {got}")]
    TooFewRecords { min: usize, got: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("png error: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
