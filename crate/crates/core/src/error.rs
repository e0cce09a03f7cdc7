use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification of an [`Error`], used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input files, configuration or arguments.
    Input,
    /// A numerical contract was violated (PSD check, degenerate bandwidth, ...).
    Numerical,
    /// The clustering itself is degenerate (too few populated clusters, ...).
    Degenerate,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },
    #[error("duplicate observation for individual `{id}` at timestamp {timestamp}")]
    DuplicateTimestamp { id: String, timestamp: f64 },
    #[error("dataset needs at least 2 individuals, found {0}")]
    TooFewIndividuals(usize),
    #[error("invalid series `{id}`: {reason}")]
    InvalidSeries { id: String, reason: String },
    #[error("variable `{variable}` is entirely missing for individual `{id}`")]
    VariableEntirelyMissing { id: String, variable: String },
    #[error("series contains missing values; repair them first")]
    MissingValues,
    #[error("series must not be empty")]
    EmptySeries,
    #[error("dimension mismatch: {left} vs {right} variables")]
    DimensionMismatch { left: usize, right: usize },
    #[error("band radius {radius} is narrower than the length difference {diff}")]
    BandTooNarrow { radius: usize, diff: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("all per-pair median distances are zero; bandwidth must be positive")]
    DegenerateSigma,
    #[error("kernel value out of representable range; use a normalized kernel")]
    KernelOutOfRange,
    #[error("kernel matrix is not positive semi-definite: min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e}")]
    NotPositiveSemiDefinite {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("negative radicand {0:e} in kernel-induced distance")]
    NegativeRadicand(f64),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("silhouette undefined: only {0} populated cluster(s)")]
    SilhouetteUndefined(usize),
    #[error("degenerate separation: two cluster representatives coincide")]
    DegenerateSeparation,
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            DegenerateSigma
            | KernelOutOfRange
            | NotPositiveSemiDefinite { .. }
            | NegativeRadicand(_)
            | BandTooNarrow { .. } => ErrorKind::Numerical,
            SilhouetteUndefined(_) | DegenerateSeparation => ErrorKind::Degenerate,
            _ => ErrorKind::Input,
        }
    }
}
