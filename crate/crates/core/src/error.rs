use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene generation infeasible: {0}")]
    Infeasible(String),

    #[error("dataset balance violated: {0}")]
    Balance(String),

    #[error("task {task}: positive fraction {achievable:.3} is outside the required band [{lo}, {hi}]")]
    Stratification {
        task: usize,
        achievable: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at example {index}")]
    NonFinite { index: usize },

    #[error("episode {episode} failed to reach criterion within {epochs} epochs")]
    NotConverged { episode: usize, epochs: usize },

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("inputs do not share a configuration: {0}")]
    MixedConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}
