use thiserror::Error;

/// Errors produced by the core tensor and quantization primitives.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("data length {actual} does not match shape element count {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("zero-sized extent at axis {axis}")]
    ZeroExtent { axis: usize },

    #[error("shape {dims:?} overflows the element counter")]
    ShapeOverflow { dims: Vec<usize> },

    #[error("expected rank {expected}, got {actual}")]
    RankMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("need at least {needed} elements, got {got}")]
    NotEnoughElements { needed: usize, got: usize },

    #[error("invalid quantizer parameters: {0}")]
    InvalidQParams(String),

    #[error("granularity mismatch: {0}")]
    GranularityMismatch(String),

    #[error("group count {k} does not divide embedding width {d}")]
    GroupCount { d: usize, k: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("no observed batches")]
    NoObservations,

    #[error("calibration cache would exceed the {cap}-element cap")]
    CalibrationCacheFull { cap: usize },

    #[error("i32 accumulator overflow at output element {output_index}")]
    AccumulatorOverflow { output_index: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;
