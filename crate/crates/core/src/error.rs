use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("sample {sample}: label needs {required} frames but only {available} are available")]
    LabelTooLong { sample: usize, required: usize, available: usize },

    #[error("brute-force alignment limited to {max} frames, got {frames}")]
    TooManyFrames { frames: usize, max: usize },

    #[error("text {text:?} does not fit the canvas: {reason}")]
    TextDoesNotFit { text: String, reason: String },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite training loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
