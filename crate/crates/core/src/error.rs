use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Each variant names the module that produced it so CLI messages stay
/// traceable.
#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("dataset: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("basis: {0}")]
    Basis(String),
    #[error("mgs: column {column} is numerically dependent on the previous columns (residual norm {residual:.3e})")]
    RankDeficient { column: usize, residual: f64 },
    #[error("mgs: {0}")]
    Mgs(String),
    #[error("model: {0}")]
    Numerical(String),
    #[error("optim: {0}")]
    Optim(String),
    #[error("select: {0}")]
    Select(String),
    #[error("infer: {0}")]
    Infer(String),
    #[error("simulate: {0}")]
    Simulate(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FpcaError {
    /// Process exit code for the CLI: 2 for I/O and configuration problems,
    /// 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpcaError::Io { .. }
            | FpcaError::MalformedRow { .. }
            | FpcaError::Dataset(_)
            | FpcaError::Config(_)
            | FpcaError::Json(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, FpcaError>;
