use std::path::PathBuf;

/// Errors produced by the ranging stack and its simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("inconsistent exchange: time of flight {tof_s:.6} s is negative")]
    InconsistentExchange { tof_s: f64 },

    #[error("missed reply slot: index {requested} is behind the speaker write head {head}")]
    MissedReplySlot { requested: i64, head: i64 },

    #[error("device is not calibrated")]
    NotCalibrated,

    #[error("TDMA violation: emissions from device {first} and device {second} overlap")]
    TdmaViolation { first: usize, second: usize },

    #[error("scenario `{field}`: {reason}")]
    Scenario { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
