//! Crate-wide error type.

/// Errors produced by covariance assembly, factorization, solvers, training,
/// and file IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array dimensions do not line up (sample dimensions, cluster sizes,
    /// operator/right-hand-side shapes).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The call itself is invalid (bad flag combination, empty input,
    /// inconsistent shortcut).
    #[error("invalid usage: {0}")]
    Usage(String),

    /// A diagonal block stayed non-positive-definite through every jitter
    /// retry.
    #[error("cholesky factorization failed on block {block} after {retries} jitter retries")]
    Factorization { block: usize, retries: usize },

    /// The representative covariance has a non-positive smallest eigenvalue,
    /// so the spectral compensation is undefined (duplicate or numerically
    /// indistinguishable representatives).
    #[error("degenerate representatives: smallest eigenvalue of the representative covariance is {lambda0:e}, expected > 0")]
    DegenerateRepresentatives { lambda0: f64 },

    /// Conjugate gradient exhausted its iteration budget.
    #[error("conjugate gradient did not converge within {max_iter} iterations ({context})")]
    NonConvergence { max_iter: usize, context: String },

    /// Dense (oracle-side) Cholesky factorization failed.
    #[error("dense factorization failed: matrix is not positive-definite")]
    DenseFactorization,

    /// A failure inside the training loop, annotated with where it happened.
    #[error("training failed at epoch {epoch} ({context}): {source}")]
    Train {
        epoch: usize,
        context: String,
        #[source]
        source: Box<Error>,
    },

    /// Generated clusters would overlap.
    #[error("cluster overlap: {0}")]
    Overlap(String),

    /// Clustering cannot produce the requested uniform cluster size.
    #[error("infeasible cluster size: {0}")]
    InfeasibleClusterSize(String),

    /// A data file is malformed or inconsistent with its manifest.
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },

    /// The dense oracle refuses problem sizes that would allocate
    /// quadratic memory by accident.
    #[error("oracle guard: n = {n} exceeds the dense-oracle limit of {limit}")]
    OracleGuard { n: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub(crate) fn format(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
