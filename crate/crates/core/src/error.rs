use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RqaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RqaError {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("schema violation at {location}: {message}")]
    SchemaViolation { location: String, message: String },

    #[error("failed to load {path} at line {line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus has {available} passages, {requested} requested")]
    InsufficientCorpus { requested: usize, available: usize },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("generation backend failed{}: {message}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    GenerationBackend {
        context: Option<String>,
        message: String,
    },

    #[error("query is empty")]
    EmptyQuery,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedder identity mismatch: index built with {index}, searched with {embedder}")]
    IdentityMismatch { index: String, embedder: String },

    #[error("non-finite value in {0}")]
    Numerical(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("prompt budget of {budget} tokens cannot fit the question ({required} tokens needed)")]
    Budget { budget: usize, required: usize },

    #[error("continuation is empty")]
    EmptyContinuation,

    #[error("component `{component}` requested missing key `{key}`")]
    MissingKey { component: String, key: String },

    #[error("component #{index} (`{component}`) failed: {source}")]
    Pipeline {
        index: usize,
        component: String,
        #[source]
        source: Box<RqaError>,
    },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("could not parse judge output: {0}")]
    JudgeParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RqaError {
    pub fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        RqaError::SchemaViolation {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn backend(context: Option<String>, message: impl Into<String>) -> Self {
        RqaError::GenerationBackend {
            context,
            message: message.into(),
        }
    }
}
