use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("point {0:?} is outside the grid")]
    OutOfBounds([f64; 3]),
    #[error("object {0} not found in scene")]
    NotFound(u32),
    #[error("surface normal undefined at {0:?}")]
    NoNormal([f64; 3]),
    #[error("sampling exhausted: found {found} of {wanted} after {attempts} attempts")]
    SamplingExhausted {
        wanted: usize,
        found: usize,
        attempts: usize,
    },
    #[error("invalid format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
