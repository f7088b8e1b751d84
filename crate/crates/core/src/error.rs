use thiserror::Error;

/// Errors raised by the estimation library.
///
/// Variants are grouped by how a batch driver should react to them; see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("collinearity error: dependent columns {columns:?}")]
    Collinearity { columns: Vec<String> },

    #[error("convergence error after {iterations} iterations (trace: {trace:?})")]
    Convergence { iterations: usize, trace: Vec<f64> },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 input/validation, 3 capacity or degenerate
    /// design, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity(_) | Error::DegenerateDesign(_) | Error::Collinearity { .. } => 3,
            Error::Convergence { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
