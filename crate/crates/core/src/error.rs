use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// `Invalid` covers caller mistakes (bad flags, malformed files, violated
/// preconditions); the CLI maps it to exit code 2. Everything else is a
/// runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("point is {distance:.2} m from the centerline (limit {limit} m)")]
    OutOfDomain { distance: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("expert terminated with {kind} at t = {time:.1} s (sigma = {sigma:.1} m): parameters unsafe for this track")]
    ExpertTerminated {
        kind: String,
        time: f64,
        sigma: f64,
    },

    #[error("noise tuning failed: best coverage {coverage:.4} < 0.99")]
    Coverage { coverage: f64 },

    #[error("trajectory sampling acceptance rate {rate:.2e} after {attempts} attempts")]
    Acceptance { rate: f64, attempts: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rollout aborted: {0}")]
    Rollout(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Parse { .. } | Error::Dimension { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
