use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config key `{key}`: {reason} (value `{value}`)")]
    ConfigValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("index {index} out of range (len {len}) in {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("gate value {value} for sample {sample} layer {layer} {method} is outside (0, 1)")]
    GateOutOfRange {
        sample: usize,
        layer: usize,
        method: &'static str,
        value: f64,
    },

    #[error("duplicate telemetry record for sample {sample} layer {layer} {method}")]
    DuplicateRecord {
        sample: usize,
        layer: usize,
        method: &'static str,
    },

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:e}, max |grad| {max_grad:e}); aborting"
    )]
    NonFiniteLoss { step: usize, lr: f64, max_grad: f64 },

    #[error("frozen parameter `{0}` changed during training")]
    FrozenParamMutated(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint holds mode {found}, expected {expected}")]
    ModeMismatch { expected: String, found: String },

    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
