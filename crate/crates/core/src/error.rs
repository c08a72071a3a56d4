use thiserror::Error;

/// Errors produced by the composition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate quadrilateral: {0}")]
    DegenerateQuad(String),

    #[error("degenerate illumination: band-1 energy {energy:e} below threshold")]
    DegenerateIllumination { energy: f64 },

    #[error("homography is not invertible (det = {det:e}, cond = {cond:e})")]
    NonInvertible { det: f64, cond: f64 },

    #[error("no free region found after {attempts} attempts")]
    NoRegionFound { attempts: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
