use fgaa_geometry::GeometryError;
use fgaa_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("config: {0}")]
    Config(String),
    #[error("line {line}: {message} (token `{token}`)")]
    Parse {
        line: usize,
        token: String,
        message: String,
    },
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
