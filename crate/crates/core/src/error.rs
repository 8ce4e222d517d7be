use thiserror::Error;

/// Failure modes shared by all modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A precondition on the arguments does not hold.
    #[error("usage error: {0}")]
    Usage(String),
    /// An index lies outside the admissible range.
    #[error("index error: {0}")]
    Index(String),
    /// A norm or entry overflowed to a non-finite value.
    #[error("range error at shell {shell}: {what}")]
    Range { shell: usize, what: String },
    /// A time stepper produced a non-finite or runaway state.
    #[error("blow-up at shell {shell}, step {step}, t = {time}")]
    BlowUp { shell: usize, step: usize, time: f64 },
    /// An iteration did not reach its tolerance.
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    /// A post-check on a scheme output failed.
    #[error("scheme failure: {0}")]
    Scheme(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
