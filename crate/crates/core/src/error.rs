use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error at {path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dataset(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Dataset {
            path: path.into(),
            source,
        }
    }
}
