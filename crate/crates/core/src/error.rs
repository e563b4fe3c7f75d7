use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate reference returns: expert and random both score {0}")]
    DegenerateReference(f64),
    #[error("inner/outer pairing error: {0}")]
    Pairing(String),
    #[error("empty batch source: {0}")]
    EmptySource(String),
    #[error("oracle inconsistency: {0}")]
    OracleInconsistency(String),
    #[error("oracle check failed: {0}")]
    OracleFailure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Domain(_) | LabError::Shape(_) => 2,
            LabError::Divergence(_) | LabError::NonFinite(_) => 3,
            LabError::OracleInconsistency(_) | LabError::OracleFailure(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Shape(_) => "shape",
            LabError::NonFinite(_) => "non_finite",
            LabError::Divergence(_) => "divergence",
            LabError::Domain(_) => "domain",
            LabError::DegenerateReference(_) => "degenerate_reference",
            LabError::Pairing(_) => "pairing",
            LabError::EmptySource(_) => "empty_source",
            LabError::OracleInconsistency(_) => "oracle_inconsistency",
            LabError::OracleFailure(_) => "oracle_failure",
            LabError::Config(_) => "config",
            LabError::Io(_) => "io",
            LabError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> LabError {
    LabError::Shape(what.into())
}
