use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("example at line {line} references unknown template `{template_id}`")]
    DanglingTemplate { line: usize, template_id: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("corpus needs at least {needed} templates, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("synthetic generator cannot realise {requested} distinct templates (capacity {capacity})")]
    GenerationCapacity { requested: usize, capacity: usize },

    #[error("no precomputed vectors for question `{0}`")]
    MissingVector(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("classification needs at least two templates")]
    DegenerateClassification,

    #[error("candidate set is empty")]
    EmptyMemory,

    #[error("support set is empty")]
    EmptySupport,

    #[error("template `{0}` already present in candidate set")]
    DuplicateTemplate(String),

    #[error("episode infeasible: {eligible} eligible templates, {requested} requested")]
    EpisodeInfeasible { requested: usize, eligible: usize },

    #[error("incompatible initialisation: {0}")]
    IncompatibleInit(String),

    #[error("missing value for variable `{0}`")]
    IncompleteAssignment(String),

    #[error("checkpoint incomplete, missing keys: {}", .missing.join(", "))]
    Integrity { missing: Vec<String> },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint dtype {found} does not match {expected}")]
    Dtype { expected: String, found: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
