use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report. Variants are grouped loosely by the
/// stage that produces them; [`Error::kind`] gives a stable machine-readable tag.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("row {row} has norm {norm}, expected 1 within {tolerance}")]
    NormViolation { row: usize, norm: f64, tolerance: f64 },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("zero vector after pooling ({0})")]
    ZeroNorm(String),
    #[error("empty target set")]
    EmptyTargets,
    #[error("empty cluster {0}")]
    EmptyCluster(usize),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::NormViolation { .. } => "norm_violation",
            Error::Schema(_) => "schema",
            Error::Invariant(_) => "invariant",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm(_) => "zero_norm",
            Error::EmptyTargets => "empty_targets",
            Error::EmptyCluster(_) => "empty_cluster",
            Error::Infeasible(_) => "infeasible",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }

    /// Short remediation hint surfaced by the CLI next to the error.
    pub fn hint(&self) -> &'static str {
        match self {
            Error::Io { .. } => "check that the path exists and is readable/writable",
            Error::BadMagic { .. } | Error::UnsupportedVersion(_) | Error::UnsupportedDtype(_) => {
                "the file was not produced by a compatible writer; regenerate it"
            }
            Error::NormViolation { .. } => {
                "feature rows must be L2-normalized; fix the extractor or pass --skip-norm-check"
            }
            Error::Schema(_) => "validate the JSON/CSV input against docs/format.md",
            Error::Invariant(_) => "inputs are inconsistent with each other; regenerate them together",
            Error::DimensionMismatch(_) => "make sure all inputs come from the same feature file",
            Error::NonFinite(_) => "inputs contain NaN or infinity; inspect the extractor output",
            Error::ZeroNorm(_) => "token activations are all zero; check the upstream data",
            Error::EmptyTargets => "pass at least one target cluster",
            Error::EmptyCluster(_) => "re-run clustering; clusters must be non-empty",
            Error::Infeasible(_) => "lower the coreset size or sampling ratio",
            Error::InvalidArgument(_) => "see --help for valid ranges",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
