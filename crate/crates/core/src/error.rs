use thiserror::Error;

use crate::TruncationCertificate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {what}; supported domain is {supported}")]
    Range { what: String, supported: String },

    #[error("invalid model space: {0}")]
    InvalidSpace(String),

    #[error("operation `{op}` is not supported on {space}")]
    Unsupported { op: &'static str, space: String },

    #[error("point does not belong to {space}: {reason}")]
    PointMismatch { space: String, reason: String },

    #[error(
        "series budget exceeded: tail bound {:e} > target {:e} after {} terms",
        best.tail_bound, best.target_tol, best.terms_used
    )]
    BudgetExceeded { best: TruncationCertificate },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("calibration failed: no sign change over {} scanned values", scan.len())]
    CalibrationFailed { scan: Vec<(f64, f64)> },

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
