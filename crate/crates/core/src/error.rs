use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index:?} out of bounds for shape {shape:?}")]
    OutOfBounds { index: Vec<usize>, shape: Vec<usize> },

    /// A monomial input was not strictly positive; the input shift was skipped or broken.
    #[error("positivity violation: value {value} <= 0 (was the input shift applied?)")]
    Positivity { value: f64 },

    #[error("singular system in closed-form fit; use a ridge lambda > 0")]
    Singular,

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("invalid label {label} for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("training diverged at phase {phase}, epoch {epoch}: loss {loss}")]
    Divergence { phase: u8, epoch: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
