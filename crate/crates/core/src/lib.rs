//! Gaussian process regression for cluster-structured data.
//!
//! The covariance matrix of a clustered training set is approximated by its
//! exact diagonal blocks plus rank-1 off-diagonal blocks built from one
//! representative point per cluster, with a spectral compensation on the
//! block diagonal that keeps the result symmetric positive-definite. All
//! solves go through a batched conjugate gradient method, split-preconditioned
//! by the block Cholesky factors of the diagonal, and the log-determinant is
//! estimated with Hutchinson probes and a 2-2 Padé matrix logarithm on the
//! preconditioned operator. Hyperparameters are trained with forward-difference
//! numerical gradients and Adam, so no derivatives of the kernel are needed.
//!
//! Modules:
//! - [`kernel`]: RBF kernel and covariance assembly (dense and structured).
//! - [`structured`]: the structured operator, its block Cholesky
//!   preconditioner, and the matrix-free preconditioned applications.
//! - [`pcg`]: batched conjugate gradient over an abstract SPD operator.
//! - [`logdet`]: Hutchinson/Padé log-determinant estimation.
//! - [`train`]: marginal-likelihood loss, numerical gradients, Adam, and the
//!   training loop.
//! - [`predict`]: posterior mean/variance and accuracy metrics.
//! - [`data`]: synthetic generators, k-means clustering, representative
//!   selection, and array-file IO.
//! - [`oracle`]: exact dense reference implementation used for validation.

pub mod data;
pub mod error;
pub mod kernel;
pub mod logdet;
pub mod oracle;
pub mod pcg;
pub mod predict;
pub mod real;
pub mod structured;
pub mod train;

pub use error::{Error, Result};
pub use kernel::Hyperparameters;
pub use real::Real;
