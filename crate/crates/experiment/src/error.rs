use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Core(#[from] weakinv_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("table file error: {0}")]
    Table(String),
}

pub type Result<T> = std::result::Result<T, ExpError>;
