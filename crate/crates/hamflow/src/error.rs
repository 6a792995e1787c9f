use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dimension disagreed with what the receiving operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// A constructor or operation precondition was violated.
    #[error("{0}")]
    Invalid(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An integration step produced a non-finite stage derivative.
    /// `stage` is the Runge-Kutta stage (1..=4) that blew up.
    #[error("integration diverged at step {step}, stage {stage}")]
    Diverged { step: usize, stage: usize },

    /// Training aborted; wraps the underlying failure with loop position.
    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    TrainAborted {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// A CSV row failed to parse or had the wrong number of fields.
    /// `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown benchmark '{0}' (expected one of: two_gaussians, gaussian_ring_pair, mixture_to_mixture)")]
    UnknownBenchmark(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(context: &str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected,
            actual,
        }
    }

    pub(crate) fn non_finite(context: &str) -> Self {
        Error::NonFinite {
            context: context.to_string(),
        }
    }
}
