use std::path::PathBuf;

use swarm_autodiff::AdError;

use crate::dsl::ParseError;

/// Errors surfaced by the library. The `Display` prefix of each variant is
/// its category, which the CLI reports verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty grid")]
    EmptyGrid,
    #[error("numerics: {0}")]
    Autodiff(#[from] AdError),
    #[error("program: {0}")]
    Program(#[from] ParseError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
