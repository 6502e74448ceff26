use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: dtype mismatch")]
    DType { op: &'static str },

    #[error("softmax: row {row} is entirely masked")]
    InvalidMask { row: usize },

    #[error("l2 normalize: row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    GradientDivergence { param: String },

    #[error("training diverged: update overflowed parameter `{param}`")]
    ParameterDivergence { param: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    LossDivergence { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("kmeans infeasible: {n} points for {k} clusters")]
    Infeasible { n: usize, k: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("cluster alignment error: {0}")]
    Alignment(String),

    #[error("batch error: need at least 2 samples, got {0}")]
    Batch(usize),

    #[error("assembly error: block {block} of snapshot {snapshot}: {reason}")]
    Assembly {
        block: usize,
        snapshot: usize,
        reason: String,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("stratification error: class {class} absent from the training split")]
    Stratification { class: usize },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("shape mismatch for tensor `{tensor}`: {reason}")]
    ShapeMismatch { tensor: String, reason: String },

    #[error("truncated blob: expected {expected} bytes, found {actual}")]
    TruncatedBlob { expected: usize, actual: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical blow-up during training.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::GradientDivergence { .. } | Error::ParameterDivergence { .. } | Error::LossDivergence { .. }
        )
    }

    /// True for errors caused by invalid configuration or arguments.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    /// Process exit code: 2 for configuration errors, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else if self.is_divergence() {
            3
        } else {
            1
        }
    }
}
