use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Variants split into two families: input/validation problems (bad files,
/// bad configuration, impossible requests) and numerical failures. The CLI
/// maps them to distinct exit codes via [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file}, row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("referential integrity: {0}")]
    Integrity(String),

    #[error("unknown gene `{0}`")]
    UnknownGene(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),

    #[error("sample `{sample}` has {cells} cells, fewer than L = {l}")]
    InsufficientCells {
        sample: String,
        cells: usize,
        l: usize,
    },

    #[error("no stored kernel weights: plaques and cells never overlap at the chosen bandwidths")]
    NoOverlap,

    #[error("stratum (cell type {cell_type}, time {time}) has no positive-weight triples")]
    EmptyStratum { cell_type: usize, time: usize },

    #[error("elbow selection needs at least 3 points, got {0}")]
    DegenerateCurve(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("true coefficients must contain both zero and nonzero entries")]
    UndefinedRate,

    #[error("component {0} has a mode with all-zero loadings")]
    UndefinedDirection(usize),

    #[error("group {group} has {available} spots, cannot place {needed} plaques")]
    InfeasibleBalance {
        group: usize,
        available: usize,
        needed: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("objective diverged at outer iteration {0}")]
    Divergence(usize),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Divergence(_) | Error::NoOverlap
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
