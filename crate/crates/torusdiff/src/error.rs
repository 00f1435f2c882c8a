//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A single Euler step produced a non-finite state.
    #[error("euler step produced a non-finite state")]
    NonFiniteStep,

    #[error("integration diverged at step {step}: state became non-finite")]
    IntegrationDiverged { step: usize },

    #[error("tau = {tau} is not an integer multiple of the base step tau0 = {tau0}")]
    InvalidStride { tau: f64, tau0: f64 },

    #[error("requested horizon T = {requested} exceeds the available T0 = {available}")]
    InsufficientData { requested: f64, available: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("observable is constant along the trajectory; autocorrelation is undefined")]
    UndefinedCorrelation,

    #[error("non-finite loss at optimizer step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV parse error at {path} line {line}: {message}")]
    CsvParse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
