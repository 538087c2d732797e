use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeomError>;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error(transparent)]
    Numerics(#[from] geomlab_numerics::NumericsError),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("detection box {0:?} does not fit a {1}x{2} image")]
    BoxOutOfImage([f64; 4], usize, usize),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Format(String),

    #[error("training diverged at step {step} (lr {lr}, batch {batch:?}): non-finite loss")]
    Diverged { step: usize, lr: f64, batch: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> GeomError {
    GeomError::InvalidArgument(msg.into())
}
