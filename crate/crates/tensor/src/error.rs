use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("invalid mask: row {row} has no unmasked position")]
    InvalidMask { row: usize },
    #[error("cross-entropy has no live targets (all equal ignore_index)")]
    EmptyLoss,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: i64, classes: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable was recorded on a different tape")]
    ForeignVar,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective failed: {0}")]
    Objective(String),
}
