use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the library.
///
/// [`Error::code`] gives a short stable tag used by the CLI for
/// machine-parseable error lines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("invalid graph: {0}")]
    Graph(String),
    /// `context` locates the problem: `line L, column C` for syntax errors,
    /// or the offending field for semantic ones.
    #[error("parse error in {path} at {context}: {message}")]
    Parse {
        path: PathBuf,
        context: String,
        message: String,
    },
    #[error("metric unavailable: {0}")]
    Metric(String),
    #[error("training diverged at epoch {epoch}: {term} is {value}")]
    Divergence {
        epoch: usize,
        term: &'static str,
        value: f64,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Index { .. } => "index",
            Error::Graph(_) => "graph",
            Error::Parse { .. } => "parse",
            Error::Metric(_) => "metric",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
