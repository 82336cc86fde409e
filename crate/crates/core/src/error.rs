use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch{}: expected {expected}, got {got}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: Option<String>,
    },

    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("record `{record}` is missing attribute `{attribute}`")]
    MissingAttribute { record: String, attribute: String },

    #[error("degenerate mixture component {component} (effective count {mass:.3} < {required})")]
    DegenerateComponent {
        component: usize,
        mass: f64,
        required: usize,
    },

    #[error("only one class present{}", context_suffix(.0))]
    SingleClass(Option<String>),

    #[error("fairness loss requires group labels but none were supplied")]
    NoGroups,

    #[error("unsupported number of methods k = {0} (table covers 2..=20)")]
    UnsupportedK(usize),

    #[error("too many clusters for exhaustive subset enumeration: {0} > 20")]
    TooManyClusters(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("record `{0}` not found")]
    UnknownRecord(String),

    #[error("union of clusters exceeds the worst cluster risk by {0:e}")]
    LemmaViolated(f64),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn context_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input (files, flags, schema) rather than a
    /// numerical failure inside the pipeline.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::DegenerateComponent { .. } | Error::LemmaViolated(_)
        )
    }
}
