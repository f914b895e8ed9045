use thiserror::Error;

/// Errors surfaced by the library. Numerical invariant violations (NaN/Inf)
/// are always reported, never silently propagated.
#[derive(Debug, Error)]
pub enum EvaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A forward computation produced a NaN or infinity. `node` names the
    /// first offending graph node (op kind plus insertion index).
    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A pipeline stage was invoked before the artifact it consumes exists.
    #[error("missing artifact '{name}': expected at {path}")]
    MissingArtifact { name: String, path: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvaError>;
