use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("unknown elementwise kind `{0}`")]
    UnknownOp(String),

    #[error("target value {value} outside [0, 1]")]
    TargetOutOfRange { value: f64 },

    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss function is not deterministic: two identical passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: shape mismatch for `{name}`: file has {found:?}, model expects {expected:?}")]
    ParamShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint: missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint: file truncated")]
    Truncated,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
