use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid bit width {bits} for {scheme} quantizer")]
    InvalidBits { scheme: &'static str, bits: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid ratio: {0}")]
    Ratio(String),

    #[error("missing row assignment for layer {0}")]
    MissingAssignment(usize),

    #[error("truncated {0}")]
    Truncated(String),

    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("unsupported checkpoint format version {0}")]
    Version(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
