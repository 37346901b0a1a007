use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A point or symbol lies outside the task domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// An invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),
    /// A malformed dataset, trajectory, or checkpoint file.
    #[error("format error: {0}")]
    Format(String),
    /// Bin scores cannot be turned into sample counts.
    #[error("allocation error: {0}")]
    Allocation(String),
    #[error("sequence of {len} timesteps exceeds context length {max}")]
    Context { len: usize, max: usize },
    /// Training produced a NaN or infinite loss; the model keeps its last finite weights.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} ({windows} windows)")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        windows: usize,
    },
    /// Input has no usable spread (e.g. a constant function).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(std::path::PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
