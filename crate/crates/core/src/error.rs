use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("frequency tuple {values:?} does not sum to zero (residual {residual:e})")]
    NotZeroSum { values: Vec<f64>, residual: f64 },

    #[error("arity {got} not supported here (expected {expected})")]
    Arity { got: usize, expected: &'static str },

    #[error(
        "resonance guard violated at {tuple:?}: |alpha| = {alpha:e} below guard but |multiplier| = {multiplier:e}"
    )]
    ResonanceGuard {
        tuple: Vec<f64>,
        alpha: f64,
        multiplier: f64,
    },

    #[error("solution blew up at t = {time}: {reason}")]
    BlowUp { time: f64, reason: String },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file}: {message}")]
    Parse { file: PathBuf, message: String },

    #[error("manifest hash mismatch: manifest has {expected}, config hashes to {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
