//! Error types shared across the engine.
//!
//! Every fallible operation returns [`TadsError`]. The CLI maps error
//! categories to process exit codes, so variants are grouped by what went
//! wrong (configuration, missing pipeline dependency, bad data, numeric
//! domain violation) rather than by which module raised them.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, TadsError>;

#[derive(Debug, thiserror::Error)]
pub enum TadsError {
    /// A value left the domain an operation is defined on (zero-norm vector,
    /// non-finite gradient, probability outside (0, 1)).
    #[error("numerical domain violation: {0}")]
    NumericalDomain(String),

    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is rejected before any work starts.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Record file and embedding file disagree about the corpus.
    #[error("corpus mismatch: {0}")]
    CorpusMismatch(String),

    /// A record file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An embedding row failed unit-norm validation.
    #[error("embedding norm violation: {0}")]
    Norm(String),

    /// An index referred outside the structure it indexes.
    #[error("index out of bounds: {0}")]
    Index(String),

    /// Input carries no usable signal (all labeling functions abstained,
    /// a class is empty, a batch is too small to contrast).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A Bernoulli draw selected nothing; callers decide whether this maps
    /// to a zero reward or an abort.
    #[error("selected subset is empty")]
    EmptySubset,

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("missing upstream artifact: run stage '{stage}' first")]
    Dependency { stage: String },

    /// Another process holds the output directory.
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl TadsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TadsError::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        TadsError::Json { context: context.into(), source }
    }

    pub fn dependency(stage: impl Into<String>) -> Self {
        TadsError::Dependency { stage: stage.into() }
    }

    /// Process exit code for the CLI: 2 config, 3 dependency, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            TadsError::InvalidConfig(_) => 2,
            TadsError::Dependency { .. } | TadsError::Locked(_) => 3,
            _ => 4,
        }
    }
}
