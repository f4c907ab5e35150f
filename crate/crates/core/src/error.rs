use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NumericOverflow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes (example {index})")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        index: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("overlap undefined: both masks are empty")]
    UndefinedOverlap,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown dataset generator `{0}`")]
    UnknownGenerator(String),

    #[error("malformed CSV {path}: {detail}")]
    MalformedCsv { path: PathBuf, detail: String },

    #[error("unsupported file format version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves (divergence,
    /// overflow) rather than by bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericOverflow(_))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            context,
            expected,
            found,
        })
    }
}
