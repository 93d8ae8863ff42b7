use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invariant violated: {0}")]
    Invalid(String),

    #[error("profile-miss: no entry for layer={layer} tmp={tmp} mbs={mbs}")]
    ProfileMiss {
        layer: usize,
        tmp: usize,
        mbs: usize,
    },

    #[error("invalid bandwidth {0}: must be positive")]
    InvalidBandwidth(f64),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("brute force refused: {layers} layers exceeds cap of {cap}")]
    BruteForceCap { layers: usize, cap: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

pub type Result<T> = std::result::Result<T, PlanError>;

impl PlanError {
    /// Stable short name of the variant, used in reports and exit diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Invalid(_) => "invalid",
            Self::ProfileMiss { .. } => "profile-miss",
            Self::InvalidBandwidth(_) => "invalid-bandwidth",
            Self::Infeasible(_) => "infeasible",
            Self::BruteForceCap { .. } => "brute-force-cap",
            Self::LengthMismatch { .. } => "length-mismatch",
        }
    }
}
