//! Exact dense reference implementation.
//!
//! Used by tests and the `compare-oracle` command to validate every
//! approximation in the crate: losses, posteriors, log-determinants, and
//! gradients are all recomputed here with dense factorizations. Two dense
//! targets matter: the densified structured covariance (isolates solver and
//! estimator error) and the unapproximated covariance (quantifies the
//! modeling error of the rank-1 off-diagonal blocks). Not built for speed,
//! and capped at `DENSE_LIMIT` rows to keep accidental quadratic-memory use
//! out of test runs.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::Hyperparameters;
use crate::predict::Posterior;
use crate::real::Real;
use crate::structured::{JitterPolicy, StructuredKernel};

/// Largest n the dense oracle will touch.
pub const DENSE_LIMIT: usize = 4096;

fn guard(n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        return Err(Error::OracleGuard {
            n,
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

/// Materializes the structured covariance as a dense matrix: diagonal blocks
/// in place, every off-diagonal block filled with its representative kernel
/// value, and the compensation added on the block diagonal.
pub fn densify<T: Real>(sk: &StructuredKernel<T>) -> DMatrix<T> {
    let (n_c, b, n) = (sk.n_clusters(), sk.cluster_size(), sk.n());
    assert!(n <= DENSE_LIMIT, "densify refuses n > {DENSE_LIMIT}");
    let m = sk.coeff_matrix();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n_c {
        out.view_mut((i * b, i * b), (b, b)).copy_from(sk.diag_block(i));
        for j in 0..n_c {
            let coeff = m[(i, j)];
            if coeff != T::zero() {
                let mut view = out.view_mut((i * b, j * b), (b, b));
                for r in 0..b {
                    for c in 0..b {
                        view[(r, c)] += coeff;
                    }
                }
            }
        }
    }
    out
}

/// A dense SPD covariance with its Cholesky factor and exact
/// log-determinant.
pub struct DenseModel<T: Real> {
    factor: nalgebra::linalg::Cholesky<T, Dyn>,
    logdet: T,
    n: usize,
}

impl<T: Real> DenseModel<T> {
    pub fn new(k_hat: DMatrix<T>) -> Result<Self> {
        let n = k_hat.nrows();
        if n == 0 || k_hat.ncols() != n {
            return Err(Error::shape(format!(
                "dense covariance must be square and non-empty, got {}x{}",
                n,
                k_hat.ncols()
            )));
        }
        guard(n)?;
        let factor = nalgebra::linalg::Cholesky::new(k_hat).ok_or(Error::DenseFactorization)?;
        let mut logdet = T::zero();
        let l = factor.l_dirty();
        for i in 0..n {
            logdet += l[(i, i)].ln();
        }
        logdet *= T::of_f64(2.0);
        Ok(Self { factor, logdet, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    pub fn solve(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        self.factor.solve(rhs)
    }

    /// Negative marginal log likelihood `½(yᵀK⁻¹y + log|K| + n·log 2π)`.
    pub fn loss(&self, y: &DVector<T>) -> T {
        let u = self.factor.solve(y);
        let quad = y.dot(&u);
        let half = T::of_f64(0.5);
        half * (quad + self.logdet + T::of_f64(self.n as f64) * T::two_pi().ln())
    }
}

/// One-shot exact loss on a dense SPD covariance.
pub fn exact_loss<T: Real>(k_hat: &DMatrix<T>, y: &DVector<T>) -> Result<T> {
    if y.len() != k_hat.nrows() {
        return Err(Error::shape(format!(
            "labels have length {}, covariance is {}x{}",
            y.len(),
            k_hat.nrows(),
            k_hat.ncols()
        )));
    }
    Ok(DenseModel::new(k_hat.clone())?.loss(y))
}

/// Exact posterior by direct dense solves: mean `K*ᵀK⁻¹y`, per-point
/// variance `k(x,x) − K*(:,j)ᵀK⁻¹K*(:,j)`.
pub fn exact_posterior<T: Real>(
    k_hat: &DMatrix<T>,
    k_star: &DMatrix<T>,
    k_ss_diag: &DVector<T>,
    y: &DVector<T>,
) -> Result<Posterior<T>> {
    if k_star.nrows() != k_hat.nrows() || k_ss_diag.len() != k_star.ncols() {
        return Err(Error::shape(format!(
            "cross covariance is {}x{}, expected {} rows and {} diagonal entries",
            k_star.nrows(),
            k_star.ncols(),
            k_hat.nrows(),
            k_star.ncols()
        )));
    }
    let model = DenseModel::new(k_hat.clone())?;
    let u = model.solve(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
    let mean = DVector::from_fn(k_star.ncols(), |j, _| k_star.column(j).dot(&u.column(0)));
    let w = model.solve(k_star);
    let mut clamped = 0usize;
    let variance = DVector::from_fn(k_star.ncols(), |j, _| {
        let v = k_ss_diag[j] - k_star.column(j).dot(&w.column(j));
        if v < T::zero() {
            clamped += 1;
            T::zero()
        } else {
            v
        }
    });
    Ok(Posterior::from_moments(mean, variance, clamped))
}

/// Central finite differences of a loss evaluator with respect to each
/// hyperparameter. Steps are shrunk where needed to keep parameters
/// positive.
pub fn fd_gradient<T: Real>(
    mut loss: impl FnMut(&Hyperparameters<T>) -> Result<T>,
    hp: &Hyperparameters<T>,
    step: T,
) -> Result<[T; 3]> {
    let two = T::of_f64(2.0);
    let mut grads = [T::zero(); 3];
    for (i, slot) in grads.iter_mut().enumerate() {
        let mut h = step;
        while hp.as_array()[i] - h <= T::zero() {
            h /= two;
        }
        let plus = loss(&hp.perturbed(i, h))?;
        let minus = loss(&hp.perturbed(i, -h))?;
        *slot = (plus - minus) / (two * h);
    }
    Ok(grads)
}

/// Exact log-determinant through a symmetric eigendecomposition; an
/// independent route used to cross-check the Cholesky-based value.
pub fn logdet_eig<T: Real>(m: &DMatrix<T>) -> T {
    assert!(m.nrows() <= DENSE_LIMIT, "logdet_eig refuses n > {DENSE_LIMIT}");
    nalgebra::linalg::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &ev| acc + ev.ln())
}

/// Dense Cholesky with the same escalating-jitter policy as the block
/// factorization. Returns the factor and the jitter that was needed.
pub fn dense_cholesky_jittered<T: Real>(
    m: &DMatrix<T>,
    policy: &JitterPolicy<T>,
) -> Result<(nalgebra::linalg::Cholesky<T, Dyn>, T)> {
    guard(m.nrows())?;
    let mean_diag = m.diagonal().mean();
    for retry in 0..=policy.max_retries {
        let mut attempt = m.clone();
        let jitter = if retry == 0 {
            T::zero()
        } else {
            mean_diag * policy.initial_scale * policy.growth.powi(retry as i32 - 1)
        };
        if retry > 0 {
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(factor) = nalgebra::linalg::Cholesky::new(attempt) {
            return Ok((factor, jitter));
        }
    }
    Err(Error::DenseFactorization)
}
