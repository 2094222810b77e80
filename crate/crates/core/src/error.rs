use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    /// Malformed scene document; `field` names the offending entry.
    #[error("{field}: {msg}")]
    Parse { field: String, msg: String },

    #[error("placement failure: {0}")]
    Placement(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty {0} split: no frames to {1}")]
    EmptySplit(&'static str, &'static str),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Nn(#[from] radiomap_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidRegion(_) => "INVALID_REGION",
            Error::InvalidScene(_) => "INVALID_SCENE",
            Error::Parse { .. } => "PARSE",
            Error::Placement(_) => "PLACEMENT",
            Error::Config(_) => "CONFIG",
            Error::Format(_) => "FORMAT",
            Error::EmptyDataset(_) => "EMPTY_DATASET",
            Error::EmptySplit(..) => "EMPTY_SPLIT",
            Error::Mismatch(_) => "MISMATCH",
            Error::NanLoss { .. } => "NAN_LOSS",
            Error::Nn(radiomap_nn::NnError::Shape { .. }) => "SHAPE",
            Error::Nn(radiomap_nn::NnError::Format(_)) => "FORMAT",
            Error::Nn(radiomap_nn::NnError::UnknownVariant(_)) => "UNKNOWN_MODEL",
            Error::Nn(_) => "NN",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}
