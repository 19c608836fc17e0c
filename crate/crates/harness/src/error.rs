//! Harness errors and their process exit codes.

use thiserror::Error;

use crate::idx::IdxError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Idx(#[from] IdxError),
    #[error("numerics: {0}")]
    Core(#[from] kronprior::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Short category name printed with the diagnostic.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) | HarnessError::Json(_) => "config",
            HarnessError::Idx(_) => "data",
            HarnessError::Core(kronprior::Error::Io(_)) | HarnessError::Io(_) | HarnessError::Csv(_) => "io",
            HarnessError::Core(_) => "numerics",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numerics" => 4,
            _ => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
