use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`; update not applied")]
    NanGradient(String),

    #[error("solver failed at step {step} (t = {t}): {reason}")]
    Solver { step: usize, t: f64, reason: String },

    #[error("solver exceeded {max_steps} steps, reached t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },

    #[error("{failed} of {total} solves failed (limit is 10%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("metric precondition violated: {0}")]
    MetricPrecondition(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported {what} version: found {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
