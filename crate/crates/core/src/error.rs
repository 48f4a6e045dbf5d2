use thiserror::Error;

/// Errors raised by the engine. Variants map onto the CLI exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("data error at point {point}: {msg}")]
    Data { point: usize, msg: String },
    #[error("numeric error at point {point}: {msg}")]
    Numeric { point: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{op} did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverDivergence {
        op: String,
        iterations: usize,
        residual: f64,
    },
    #[error("blow-up at T={t:.6}: {msg}")]
    BlowUp { t: f64, point: usize, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Data { .. } | Error::Usage(_) | Error::Domain(_) | Error::Io(_) => 1,
            Error::SolverDivergence { .. } | Error::Numeric { .. } | Error::BlowUp { .. } => 2,
            Error::Invariant(_) => 3,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Data { .. } => "data",
            Error::Numeric { .. } => "numeric",
            Error::Usage(_) => "usage",
            Error::Domain(_) => "domain",
            Error::SolverDivergence { .. } => "solver-divergence",
            Error::BlowUp { .. } => "blow-up",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
