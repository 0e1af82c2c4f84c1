use ddatr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{branch} branch, stage {stage}: expected input {expected:?}, got {actual:?}")]
    StageGeometry {
        branch: &'static str,
        stage: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("empty text after whitespace normalization")]
    EmptyText,
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("missing prior text: attention needs at least one token")]
    MissingPriorText,
    #[error("prior image and prior report must be both present or both absent")]
    PartialPrior,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gold report is empty")]
    EmptyGold,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

impl From<ModelError> for TensorError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }
    }
}
