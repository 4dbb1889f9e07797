use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A mathematical precondition was violated (negative shift, exponent out
    /// of range, value outside an operator domain, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (length mismatch, empty input, bad label).
    #[error("contract error: {0}")]
    Contract(String),

    /// The symmetric eigensolver did not converge.
    #[error("eigensolver failure: {fingerprint}")]
    EigenFailure { fingerprint: String },

    /// An iterate became NaN/Inf or blew past the divergence guard.
    #[error("divergence at iteration {t}: {detail}")]
    Divergence { t: usize, detail: String },

    /// Tangential-cone sampling produced no usable pairs.
    #[error("degenerate sampling: {0}")]
    DegenerateSampling(String),

    /// Source construction left the operator domain or the trust ball.
    #[error("source construction infeasible: reduce D ({0})")]
    SourceInfeasible(String),

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A study-level failure (too many excluded replicates, ...).
    #[error("study error: {0}")]
    Study(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
