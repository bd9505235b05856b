use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("noise prediction undefined at t = 0")]
    ZeroNoiseLevel,

    #[error("guidance scale {gamma} requires a conditional prompt")]
    NullPromptGuidance { gamma: f64 },

    #[error("invalid step: tau = {tau} from t = {t}")]
    InvalidStep { t: f64, tau: f64 },

    #[error("trajectory has no recorded noise predictions")]
    MissingNoisePredictions,

    #[error("trajectory too short: {len} states, need at least {min}")]
    TrajectoryTooShort { len: usize, min: usize },

    #[error("{strategy} diverged: iterate norm {norm:.3e} exceeds {limit:.3e}")]
    KappaDiverged {
        strategy: String,
        norm: f64,
        limit: f64,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite canvas at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t })
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
