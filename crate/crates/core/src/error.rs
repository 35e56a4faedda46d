use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("index outside truncation: {0}")]
    OutOfTruncation(String),

    #[error("truncation mismatch: {0}")]
    TruncationMismatch(String),

    #[error(
        "divisor {divisor:.3e} below threshold {threshold:.3e} at ell={ell:?}, i={i}, j={j}"
    )]
    SmallDivisor {
        ell: Vec<i32>,
        i: i64,
        j: i64,
        divisor: f64,
        threshold: f64,
    },

    #[error("resonance at KAM step {step}: worst margin ratio {ratio:.3e} at {tuple}")]
    Resonance { step: usize, ratio: f64, tuple: String },

    #[error("Lie series divergence: {0}")]
    LieDivergence(String),

    #[error("unstable time step: dt*|H| = {0:.3} exceeds 0.5")]
    Stability(f64),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::OutOfTruncation(_) | Error::TruncationMismatch(_) => 2,
            Error::SmallDivisor { .. } | Error::Resonance { .. } => 3,
            Error::LieDivergence(_) | Error::Stability(_) => 4,
            Error::Io { .. } | Error::Json { .. } => 5,
        }
    }
}
