use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command-line front end to pick an exit
/// code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data or parameters.
    Data,
    /// A pipeline stage could not complete on valid input.
    Stage,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} symbols, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("unsupported eye-chart scale {0}")]
    UnknownScale(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("carrier at {carrier_hz} Hz is outside the capture band centred at {center_hz} Hz (±{half_band_hz} Hz)")]
    Tuning {
        carrier_hz: f64,
        center_hz: f64,
        half_band_hz: f64,
    },
    #[error("recording too short: {0}")]
    TooShort(String),
    #[error("no frame sync: correlation peak {peak:.4} below threshold {threshold:.4}")]
    NoSync { peak: f64, threshold: f64 },
    #[error("unknown phone profile {name:?}; available: {}", available.join(", "))]
    UnknownProfile {
        name: String,
        available: Vec<String>,
    },
    #[error("not enough sessions: need {needed}, have {have}")]
    InsufficientSessions { needed: usize, have: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("incomplete attacker model: {0}")]
    IncompleteSpec(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NoSync { .. } | Error::Divergence { .. } | Error::Stage { .. } => {
                ErrorKind::Stage
            }
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
