use seedenc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: u64, what: String },
    #[error("degenerate (zero-norm) vector under cosine similarity")]
    DegenerateVector,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("no qrels for queries: {0:?}")]
    MissingQrels(Vec<String>),
    #[error("checkpoint is missing tensors: {0:?}")]
    MissingTensors(Vec<String>),
    #[error("insufficient sample: {got} evaluation positions, need at least {need}")]
    InsufficientSample { got: usize, need: usize },
    #[error("invalid Markov spec: {0}")]
    Spec(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
