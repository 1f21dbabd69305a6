use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The variant is the error category;
/// the CLI maps categories to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("rank error: layer `{layer}` accepts rank at most {max}, got {rank}")]
    Rank {
        layer: String,
        rank: usize,
        max: usize,
    },

    #[error("classification error: layer `{layer}` has unknown kind `{tag}`")]
    Classification { layer: String, tag: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short category name, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Rank { .. } => "rank",
            Error::Classification { .. } => "classification",
            Error::Evaluation(_) => "evaluation",
            Error::Schedule(_) => "schedule",
            Error::Format { .. } => "format",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
        }
    }
}
