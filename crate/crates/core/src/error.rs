use thiserror::Error;

/// Failure modes shared by every stage of the synthesis and simulation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "kernel solve did not reach tolerance {tol:e}: interior rms {interior_rms:e}, slope rms {slope_rms:e}"
    )]
    KernelSolve {
        tol: f64,
        interior_rms: f64,
        slope_rms: f64,
    },

    #[error("time step failed: {0}")]
    StepFailure(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),

    #[error("config error on `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
