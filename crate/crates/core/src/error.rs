use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': cannot read '{value}' as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("insufficient data: {context} (need {needed}, have {found})")]
    InsufficientData { context: String, needed: usize, found: usize },

    #[error("degenerate column '{0}': zero variance")]
    DegenerateColumn(String),

    #[error("collinear design: column '{column}' is linearly dependent on earlier columns")]
    Collinear { column: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(
        "coordinate descent did not converge after {sweeps} sweeps \
         (last max change {max_change:.3e}, KKT residual {kkt:.3e})"
    )]
    Convergence { sweeps: usize, max_change: f64, kkt: f64 },

    #[error("degenerate risk score: the score has zero variance on the analysis split")]
    DegenerateScore,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Schema(_) => ErrorClass::Config,
            Error::Convergence { .. } | Error::Numerical(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn insufficient(context: impl Into<String>, needed: usize, found: usize) -> Self {
        Error::InsufficientData { context: context.into(), needed, found }
    }
}
