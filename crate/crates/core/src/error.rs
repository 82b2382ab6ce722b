use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad IDX magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("CSV error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split of {n} rows with test fraction {fraction} leaves an empty partition")]
    EmptySplit { n: usize, fraction: f64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
