use thiserror::Error;

#[derive(Debug, Error)]
pub enum HptrError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("insufficient data: need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate design matrix on the kept rows")]
    DegenerateDesign,
    #[error("zero robust spread in net direction {index}")]
    DegenerateDirection { index: usize },
    #[error("noise scale is zero; supply a positive floor")]
    DegenerateNoise,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("budget exceeded after completing radius {reached}")]
    Resource { reached: usize },
    #[error("release support is empty")]
    EmptySupport,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HptrError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HptrError::Resource { .. } => 3,
            HptrError::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HptrError>;

pub(crate) fn invalid(msg: impl Into<String>) -> HptrError {
    HptrError::InvalidParameter(msg.into())
}
