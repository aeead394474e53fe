use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("sample rate {found} Hz is not supported (expected {expected} Hz, resampling is not performed)")]
    SampleRate { expected: u32, found: u32 },

    #[error("empty signal")]
    EmptySignal,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("reference signal has zero energy")]
    ZeroReference,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The Gibbs kernel `exp(-lambda * M)` has a row or column that underflowed to zero.
    #[error(
        "lambda-saturation: exp(-lambda * M) underflows a full {axis} of the kernel \
         (lambda = {lambda}, {fraction:.3} of entries are zero)"
    )]
    LambdaSaturation {
        lambda: f64,
        axis: &'static str,
        fraction: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient tape is incomplete: {0}")]
    IncompleteTape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("no active segments to evaluate")]
    NoActiveSegments,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (NaN, saturation) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::LambdaSaturation { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
