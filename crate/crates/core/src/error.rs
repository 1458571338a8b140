use thiserror::Error;

/// Error taxonomy mirrored by the CLI exit codes: validation errors exit
/// with 2, numerical failures with 3, verification assertion failures with 4.
#[derive(Error, Debug)]
pub enum LabError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Process exit status assigned to this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) | LabError::Config(_) | LabError::Shape(_) => 2,
            LabError::Numerical(_) => 3,
            LabError::Verification(_) => 4,
            LabError::Io(_) | LabError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
