use thiserror::Error;

pub type Result<T, E = OpfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("line {index} ({from} -> {to}) has a singular series impedance matrix")]
    SingularImpedance { index: usize, from: usize, to: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("invalid cost model: {0}")]
    InvalidCost(String),

    #[error("starting point violates the OPF constraints by {0:.3e} p.u.")]
    InfeasibleStart(f64),

    #[error("conic solver failure: {0}")]
    Conic(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported case feature: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl OpfError {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        OpfError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
