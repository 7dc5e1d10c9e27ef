use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file contains no data rows")]
    EmptyFile { path: PathBuf },

    #[error("{path}: row {row} has {found} columns, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: cannot parse {cell:?} at ({row},{col}) as a number")]
    ParseCell {
        path: PathBuf,
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("every column has zero variance; nothing left after normalization")]
    EmptyMatrix,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("p-value mode {mode} needs a {expected} null table, got {found}")]
    NullTableMismatch {
        mode: &'static str,
        expected: &'static str,
        found: &'static str,
    },

    #[error("eigen-solver did not converge within {iterations} iterations")]
    Convergence { iterations: usize },

    #[error("matrix rank is below the {requested} requested singular vectors")]
    RankDeficient { requested: usize },

    #[error("no features selected: every score is below the threshold {threshold}")]
    NoFeaturesSelected { threshold: f64 },

    #[error("beta = {beta} lies on a phase boundary where the critical strength is ambiguous")]
    PhaseBoundary { beta: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch} after {} finite epochs", trace.len())]
    Divergence {
        epoch: usize,
        batch: usize,
        trace: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
