use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Every anchor in a contrastive batch had an empty positive set.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("separation calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("numerical overflow at row {row}: {detail}")]
    NumericalOverflow { row: usize, detail: String },

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, batch: usize, loss: f64 },

    #[error("width {width}: {source}")]
    AtWidth {
        width: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AtWidth { source, .. } | Error::Context { source, .. } => source.exit_code(),
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 4,
            _ => 3,
        }
    }
}
