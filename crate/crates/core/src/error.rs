use std::path::PathBuf;

use crate::estimators::Estimate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A point or parameter lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("graph has {vertices} vertices; the exact solver handles at most {max}")]
    Capacity { vertices: usize, max: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("invalid configuration: {}", format_violations(.0))]
    Config(Vec<Violation>),

    /// Both ends of a bisection bracket sit below the threshold.
    #[error(
        "no transition in bracket: proxy({lo_lambda}) = {:.4}, proxy({hi_lambda}) = {:.4}, both below threshold {threshold}",
        .lo.value,
        .hi.value
    )]
    NoTransition {
        lo_lambda: f64,
        hi_lambda: f64,
        threshold: f64,
        lo: Box<Estimate>,
        hi: Box<Estimate>,
    },

    #[error(
        "invalid bracket: proxy({lo_lambda}) = {:.4}, proxy({hi_lambda}) = {:.4}, threshold {threshold}",
        .lo.value,
        .hi.value
    )]
    BracketInvalid {
        lo_lambda: f64,
        hi_lambda: f64,
        threshold: f64,
        lo: Box<Estimate>,
        hi: Box<Estimate>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// One schema or semantic violation in a run configuration, located by a
/// JSON path such as `$.params.lambda`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
