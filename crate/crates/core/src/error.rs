use thiserror::Error;

/// Errors raised by the sparse substrate, the detector stages and the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel size must be odd and positive, got {0}")]
    EvenKernel(usize),
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord([i32; 3]),
    #[error("coordinate {coord:?} is not a multiple of stride {stride}")]
    Misaligned { coord: [i32; 3], stride: u32 },
    #[error("coordinate out of 32-bit range")]
    CoordRange,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stride {low} is not a multiple of stride {high}")]
    Stride { low: u32, high: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
