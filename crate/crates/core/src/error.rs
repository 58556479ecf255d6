use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // registry
    #[error("`{name}` is already registered in namespace `{namespace}`")]
    DuplicateName { namespace: String, name: String },
    #[error("unknown namespace `{0}` (expected one of model, task, processor, dataset_builder, lr_scheduler, runner)")]
    InvalidNamespace(String),
    #[error("`{name}` not found in namespace `{namespace}`{}", fmt_suggestions(.suggestions))]
    NotFound {
        namespace: String,
        name: String,
        suggestions: Vec<String>,
    },
    #[error("registry value `{0}` is not set")]
    KeyMissing(String),
    #[error("registry names must be non-empty")]
    EmptyName,
    #[error("cannot register `{name}` in `{namespace}`: registry is read-only after first lookup")]
    RegistryFrozen { namespace: String, name: String },
    #[error("handle for `{name}` in `{namespace}` has an unexpected type")]
    HandleType { namespace: String, name: String },

    // config
    #[error("config file not found: {0}")]
    FileMissing(PathBuf),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("type conflict at `{0}`: mapping merged with non-mapping")]
    TypeConflict(String),
    #[error("malformed option `{0}` (expected dotted.path=value)")]
    MalformedOption(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    // processors
    #[error("expected 3 image channels, got {0}")]
    BadChannelCount(usize),
    #[error("invalid processor settings: {0}")]
    InvalidProcessor(String),

    // data
    #[error("checksum mismatch for split `{split}`: expected {expected}, got {actual}")]
    ChecksumMismatch {
        split: String,
        expected: String,
        actual: String,
    },
    #[error("failed to fetch {url}: {cause}")]
    FetchFailed { url: String, cause: String },
    #[error("annotation record {index} is invalid: {message}")]
    AnnotationParse { index: usize, message: String },
    #[error("index {index} out of range for split of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("image decode error: {0}")]
    Image(String),

    // models
    #[error("weight shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    WeightShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("batch of size {0} is too small (need at least 2)")]
    DegenerateBatch(usize),
    #[error("caption has no target tokens")]
    EmptyCaption,
    #[error("answer list is empty")]
    EmptyAnswerList,
    #[error("mode `{mode}` requires `{field}`")]
    MissingModality { mode: String, field: String },
    #[error("model `{arch}` does not support mode `{mode}`")]
    UnsupportedMode { arch: String, mode: String },
    #[error("checkpoint was written by `{found}`, expected `{expected}`")]
    IncompatibleArch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    // tasks
    #[error("shape error: {0}")]
    Shape(String),
    #[error("query {0} has no ground-truth items")]
    EmptyGroundTruth(usize),
    #[error("label list is empty")]
    EmptyLabels,
    #[error("duplicate label `{0}`")]
    DuplicateLabels(String),
    #[error("k={k} outside 1..={n}")]
    BadK { k: usize, n: usize },

    // optim / runners
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("bad hyperparameter: {0}")]
    BadHyperparameter(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_suggestions(s: &[String]) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!(" (did you mean: {}?)", s.join(", "))
    }
}

impl Error {
    /// True for errors caused by invalid user configuration rather than runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::MalformedOption(_)
                | Error::TypeConflict(_)
                | Error::ParseError { .. }
                | Error::FileMissing(_)
                | Error::NotFound { .. }
                | Error::InvalidNamespace(_)
        )
    }
}
