use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories surfaced by every fitting and I/O entry point.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A data row failed validation while loading. `row` is 1-based and
    /// counts data rows only (the header is row 0).
    #[error("{message}, row {row}, column '{column}'")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("no convergence after {iterations} iterations (norm {norm:.3e}): {context}")]
    Convergence {
        context: String,
        iterations: usize,
        norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("singular matrix in {context} (rcond {rcond:.3e}); near-dependent columns: {columns:?}")]
    Singular {
        context: String,
        rcond: f64,
        columns: Vec<String>,
    },

    #[error("{failed} of {total} bootstrap replicates failed (limit 10%); first failure: {first}")]
    Bootstrap {
        failed: usize,
        total: usize,
        first: String,
    },
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::Csv(_) => "io",
            Error::Load { .. } | Error::Spec(_) => "spec",
            Error::Domain(_) | Error::Positivity(_) => "domain",
            Error::Convergence { .. } => "convergence",
            Error::Singular { .. } => "singularity",
            Error::Bootstrap { .. } => "bootstrap",
        }
    }
}
