use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the validity range of a model.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("spawn failed: {0}")]
    Spawn(String),

    #[error("invalid channel {channel} for subnetwork {subnetwork} (K = {num_channels})")]
    InvalidAction {
        subnetwork: usize,
        channel: usize,
        num_channels: usize,
    },

    #[error("instance too large for exhaustive search: {size} allocations")]
    InstanceTooLarge { size: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from user configuration rather than a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
