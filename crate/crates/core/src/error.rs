use thiserror::Error;

/// Errors raised across the library.
///
/// Variants are grouped so a front end can map them onto coarse exit
/// classes with [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-conditioned system (condition estimate {estimate:e})")]
    Conditioning { estimate: f64 },

    #[error("operator evaluation failed at site {site}: {source}")]
    AtSite {
        site: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDivergence { epoch: usize },

    #[error("non-finite function value during evaluation: {0}")]
    Evaluation(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("incomplete data: missing cell (sequence {sequence}, time {time}, site {site})")]
    Incomplete {
        sequence: String,
        time: usize,
        site: String,
    },

    #[error("checksum mismatch for payload `{payload}`")]
    Checksum { payload: String },

    #[error("truncated payload `{payload}`: expected {expected} bytes, found {found}")]
    Truncated {
        payload: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("path is locked by another writer: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::State(_) | Error::Locked(_) => {
                ErrorClass::Config
            }
            Error::Conditioning { .. }
            | Error::Divergence { .. }
            | Error::TrainingDivergence { .. }
            | Error::Evaluation(_)
            | Error::Domain(_) => ErrorClass::Numerical,
            Error::AtSite { source, .. } => source.class(),
            Error::Validation(_)
            | Error::Incomplete { .. }
            | Error::Checksum { .. }
            | Error::Truncated { .. }
            | Error::Version { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Domain(_) => "domain",
            Error::Conditioning { .. } => "conditioning",
            Error::AtSite { .. } => "operator",
            Error::Divergence { .. } => "divergence",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::Evaluation(_) => "evaluation",
            Error::State(_) => "state",
            Error::Incomplete { .. } => "incomplete",
            Error::Checksum { .. } => "checksum",
            Error::Truncated { .. } => "truncated",
            Error::Version { .. } => "version",
            Error::Data(_) => "data",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
