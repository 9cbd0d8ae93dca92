use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the fitting pipeline.
///
/// Variants are grouped by the coarse [`ErrorCategory`] that the command-line
/// front end maps onto exit codes.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("{family}: mean {mu} is outside the mean domain")]
    MeanDomain { family: &'static str, mu: f64 },

    #[error("{family}: response {y} is outside the response domain")]
    ResponseDomain { family: &'static str, y: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid settings: {0}")]
    Settings(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("column `{0}` has zero variance and is not exempt from standardization")]
    DegenerateColumn(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("information matrix of component {component} is singular")]
    RankDeficient { component: usize },

    #[error("inner solver did not converge for component {component} after {steps} steps")]
    InnerSolver {
        component: usize,
        steps: usize,
        last_iterate: Vec<f64>,
    },

    #[error("all mixture components were pruned")]
    Collapse,

    #[error("matrix B is near-singular (condition number {condition:.3e})")]
    NearSingular { condition: f64 },

    #[error("class {class} is empty after assignment")]
    ClassCollapse { class: usize },

    #[error("GEE did not converge after {iterations} iterations")]
    GeeNonConvergence {
        iterations: usize,
        beta: Vec<f64>,
        phi: f64,
        rho: f64,
    },

    #[error("invalid simulation design: {0}")]
    Design(String),

    #[error("every tuning parameter failed: {}", .0.join("; "))]
    AllLambdaFailed(Vec<String>),

    #[error("I/O error: {0}")]
    Io(String),
}

/// Coarse error classes, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Config,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Input => "input",
            ErrorCategory::Config => "config",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::EmptyInput(_)
            | Error::InvalidData(_)
            | Error::DegenerateColumn(_)
            | Error::ResponseDomain { .. } => ErrorCategory::Input,
            Error::Argument(_) | Error::Settings(_) | Error::Design(_) => ErrorCategory::Config,
            Error::Io(_) => ErrorCategory::Io,
            _ => ErrorCategory::Numerical,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
