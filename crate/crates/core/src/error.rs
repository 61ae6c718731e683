use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error("invalid period: {0}")]
    InvalidPeriod(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("format overflow: |x| = {0} does not fit the fixed-width format")]
    FormatOverflow(f64),
    #[error("pair ({p1}, {p2}) lies outside the total period range")]
    OutOfRange { p1: u32, p2: u32 },
    #[error("infeasible policy: {0}")]
    InfeasiblePolicy(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown symbol {symbol:?} at offset {offset}")]
    UnknownSymbol { symbol: char, offset: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds the context window of {max}")]
    Length { len: usize, max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Numerical(_) | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
