use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data at byte offset {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("missing embedding for key `{0}` (re-run the embedding export for this variant)")]
    MissingEmbedding(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("schema validation failed with {} violation(s): {}", .0.len(), summarize(.0))]
    Schema(Vec<SchemaViolation>),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("inconsistent record: {0}")]
    Inconsistent(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// An error raised inside one pipeline stage.
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Labels `self` with the pipeline stage it came from. Already labelled
    /// errors keep their original stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// One label that breaks the dataset schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub episode: usize,
    pub frame: usize,
    pub category: String,
    pub message: String,
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "episode {} frame {} category {}: {}",
            self.episode, self.frame, self.category, self.message
        )
    }
}

fn summarize(violations: &[SchemaViolation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    if violations.len() > 5 {
        parts.push(format!("... and {} more", violations.len() - 5));
    }
    parts.join("; ")
}
