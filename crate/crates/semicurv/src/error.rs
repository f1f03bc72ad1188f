use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate affine transform: |det| = {det:e} below threshold")]
    DegenerateTransform { det: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown configuration key '{key}'{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownKey { key: String, line: Option<usize> },

    #[error("configuration parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at epoch {epoch}: supervised={supervised}, consistency={consistency}")]
    NonFiniteLoss {
        epoch: u64,
        supervised: f64,
        consistency: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image decode error: {0}")]
    Image(String),
}

impl Error {
    pub fn shape_mismatch(context: &str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
