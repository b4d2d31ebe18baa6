use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VeteError>;

/// Every failure the toolkit can report.
///
/// Variants fall into three families (see [`VeteError::category`]): bad
/// configuration or invocation, malformed or inconsistent data, and numerical
/// breakdowns such as collapsed embeddings.
#[derive(Debug, Error)]
pub enum VeteError {
    // corpus
    #[error("caption is empty after tokenization")]
    EmptyCaption,
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    // encoders
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sentence embedding has zero norm")]
    DegenerateEmbedding,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("vector norm below 1e-12{}", .context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    DegenerateVector { context: Option<String> },

    // contrastive
    #[error("batch of size {0} has no derangement")]
    BatchTooSmall(usize),
    #[error("similarity standard deviation {std} below epsilon {epsilon}")]
    DegenerateSimilarities { std: f64, epsilon: f64 },

    // optim
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),
    #[error("training took no optimizer steps ({skipped} batches skipped)")]
    NoUsableBatches { skipped: usize },

    // eval
    #[error("input is constant, correlation undefined")]
    DegenerateInput,
    #[error("no evaluation item could be encoded")]
    EvaluationImpossible,
    #[error("requested {requested} pairs but only {available} available")]
    TooFewPairs { requested: usize, available: usize },
    #[error("empty score report")]
    EmptyReport,

    // search / config
    #[error("configuration error: {0}")]
    Config(String),
    #[error("all {0} trials failed")]
    SearchFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl VeteError {
    pub fn category(&self) -> ErrorCategory {
        use VeteError::*;
        match self {
            UnsupportedConfiguration(_) | Config(_) => ErrorCategory::Usage,
            EmptyCaption
            | TooFewRecords(_)
            | Format { .. }
            | Parse { .. }
            | EmptyInput
            | Shape { .. }
            | Data(_)
            | TooFewPairs { .. }
            | EmptyReport
            | Io { .. } => ErrorCategory::Data,
            DegenerateEmbedding
            | DegenerateVector { .. }
            | BatchTooSmall(_)
            | DegenerateSimilarities { .. }
            | NonFiniteGradient(_)
            | NoUsableBatches { .. }
            | DegenerateInput
            | EvaluationImpossible
            | SearchFailed(_) => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VeteError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn is_numerical(&self) -> bool {
        self.category() == ErrorCategory::Numerical
    }
}
