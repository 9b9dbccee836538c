use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty vector")]
    EmptyVector,

    #[error("temperature must be a positive finite number, got {0}")]
    BadTemperature(f64),

    #[error("matrix is already softmax-normalized")]
    AlreadyNormalized,

    #[error("index {index} out of range for batch of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("grid requires two distinct indices, got {0} twice")]
    SamePairIndex(usize),

    #[error("k={k} is invalid for batch size {n}")]
    BadK { k: usize, n: usize },

    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("batch has {images} images but {texts} texts")]
    CountMismatch { images: usize, texts: usize },

    #[error("matrix normalized={matrix} but config use_softmax={config}")]
    NormalizationMismatch { matrix: bool, config: bool },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite loss or gradient at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no values to summarize")]
    EmptyValues,

    #[error("slot {slot} value {value} outside cardinality {cardinality}")]
    SlotOutOfRange {
        slot: &'static str,
        value: usize,
        cardinality: usize,
    },

    #[error("aspect {0} has fewer than 2 values and cannot be edited")]
    UneditableAspect(String),

    #[error("missing field {0}")]
    MissingField(&'static str),

    #[error("segment {index} has start {start} >= end {end}")]
    BadSegment { index: usize, start: u64, end: u64 },

    #[error("empty subset: {0}")]
    EmptySubset(String),
}
