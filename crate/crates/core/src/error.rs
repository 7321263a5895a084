use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// No convolution output location has its whole filter neighborhood measured.
    #[error("filter too large for the sampling pattern: {0}")]
    NoValidRows(String),

    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("iteration failed: {0}")]
    Iteration(String),

    #[error("data format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Params(_) => 2,
            Error::Shape(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::NoValidRows(_) => 3,
            Error::NotHermitian(_) | Error::Eigen(_) | Error::Iteration(_) => 4,
        }
    }
}
