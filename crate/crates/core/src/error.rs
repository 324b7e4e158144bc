use thiserror::Error;

/// Error type shared by every stage of the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("class label {label} out of range 1..={n_classes}")]
    Label { label: usize, n_classes: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("transplant error: {0}")]
    Transplant(String),

    #[error("metric protocol error: {0}")]
    Protocol(String),

    #[error("video diversity {vlpips:.3e} below floor {floor:.3e}; temporal consistency undefined")]
    DiversityTooLow { vlpips: f64, floor: f64 },

    #[error("value {value} outside [{lo}, {hi}] for {what}")]
    Range {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("frozen-parameter audit failed: {0}")]
    FrozenAudit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
