use std::path::PathBuf;

/// Errors produced by the budget-control toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing grades for problems: {}", .0.join(", "))]
    MissingGrades(Vec<String>),
    #[error("budget mismatch: {0} vs {1}")]
    BudgetMismatch(usize, usize),
    #[error("prompt already carries a budget instruction")]
    DuplicateBudgetSuffix,
    #[error("curriculum is exhausted")]
    CurriculumExhausted,
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
