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

    #[error("non-finite value while probing input {input}, element {element}")]
    NonFinite { input: usize, element: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("height {height} is not divisible by hierarchy split {split}")]
    Indivisible { height: usize, split: usize },

    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid triplet batch: identity {identity} {reason}")]
    TripletBatch { identity: usize, reason: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("zero-norm feature vector at row {row} of the {set} set")]
    ZeroNorm { set: &'static str, row: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature file: {0}")]
    FeatureFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
