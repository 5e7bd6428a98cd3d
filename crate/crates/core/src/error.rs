use std::path::PathBuf;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The header line of a portable raster/mask/partition file could not be
    /// parsed or carries unexpected magic/version.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// Payload length disagrees with the dimensions announced in the header.
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    PayloadSize { expected: u64, got: u64 },

    /// A pixel marked valid holds a non-finite value.
    #[error("non-finite value at valid pixel ({row}, {col})")]
    NonFiniteValue { row: usize, col: usize },

    /// Structural problem in a mask, partition or model file.
    #[error("format error: {0}")]
    Format(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical failure, typically a Cholesky factorization that did not
    /// succeed even after the nugget was added.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// An operation that needs at least one valid datum received none.
    #[error("no valid data: {0}")]
    NoValidData(String),
}

impl Error {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
