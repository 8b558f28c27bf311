//! Stochastic log-determinant estimation on the preconditioned operator.
//!
//! The determinant of the structured covariance splits into the factored
//! block-diagonal part, known exactly from the Cholesky factors, and the
//! log-determinant of the preconditioned operator `A = R⁻ᵀ·K·R⁻¹`, which is
//! close to the identity. The latter is `tr(log A)`, estimated with
//! Hutchinson probes and the 2-2 Padé approximation
//! `log A ≈ (3A² − 3I)(A² + 4A + I)⁻¹`, whose denominator solve reuses the
//! batched CG solver. The expansion is only ever applied post-preconditioning
//! where `A ≈ I`; its accuracy on the raw covariance is not claimed anywhere.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pcg::{batch_cg, CgConfig, LinearOperator, SolveReport};
use crate::real::Real;
use crate::structured::BlockCholesky;

/// A reproducible n×m matrix of ±1 probe vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HutchinsonProbes<T> {
    z: DMatrix<T>,
    seed: u64,
}

impl<T: Real> HutchinsonProbes<T> {
    /// Wraps an existing ±1 matrix (e.g. loaded from an array file).
    pub fn from_matrix(z: DMatrix<T>, seed: u64) -> Result<Self> {
        let one = T::one();
        if z.is_empty() {
            return Err(Error::usage("probe matrix must be non-empty".to_string()));
        }
        if z.iter().any(|&v| v != one && v != -one) {
            return Err(Error::usage(
                "probe entries must all be +1 or -1".to_string(),
            ));
        }
        Ok(Self { z, seed })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn count(&self) -> usize {
        self.z.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Generates n×m probes with entries drawn uniformly from {−1, +1},
/// column-major from a seeded stream.
pub fn hutchinson_gen<T: Real>(n: usize, m: usize, seed: u64) -> HutchinsonProbes<T> {
    assert!(n >= 1 && m >= 1, "probe dimensions must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = T::one();
    let mut z = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            z[(i, j)] = if rng.random::<bool>() { one } else { -one };
        }
    }
    HutchinsonProbes { z, seed }
}

/// The Padé denominator `Q(A) = A² + 4A + I` as a matrix-free operator; SPD
/// whenever `A` is.
struct PadeDenominator<'a, T, Op: ?Sized> {
    inner: &'a Op,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real, Op: LinearOperator<T> + ?Sized> LinearOperator<T> for PadeDenominator<'_, T, Op> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &DMatrix<T>) -> DMatrix<T> {
        let av = self.inner.apply(v);
        let aav = self.inner.apply(&av);
        aav + av * T::of_f64(4.0) + v
    }
}

/// Estimates `log|K|` as the factored part plus the Hutchinson/Padé trace
/// term `(1/m)·Σ_i z_iᵀ·(3A² − 3I)·w_i` with `(A² + 4A + I)·W = Z`.
///
/// Returns the estimate together with the report of the inner batched solve.
pub fn estimate_logdet<T: Real, Op: LinearOperator<T> + ?Sized>(
    bc: &BlockCholesky<T>,
    precond_op: &Op,
    probes: &HutchinsonProbes<T>,
    cg: &CgConfig<T>,
) -> Result<(T, SolveReport<T>)> {
    if probes.n() != precond_op.dim() || probes.n() != bc.n() {
        return Err(Error::shape(format!(
            "probes have dimension {}, operator {}, factors {}",
            probes.n(),
            precond_op.dim(),
            bc.n()
        )));
    }
    let z = probes.matrix();
    let quadratic = PadeDenominator {
        inner: precond_op,
        _marker: std::marker::PhantomData,
    };
    let (w, report) = batch_cg(&quadratic, z, cg);
    if !report.converged {
        return Err(Error::NonConvergence {
            max_iter: cg.max_iter,
            context: "Padé log-determinant solve".to_string(),
        });
    }

    let aw = precond_op.apply(&w);
    let aaw = precond_op.apply(&aw);
    let numerator = (aaw - &w) * T::of_f64(3.0);
    let mut trace = T::zero();
    for j in 0..probes.count() {
        trace += z.column(j).dot(&numerator.column(j));
    }
    trace /= T::of_f64(probes.count() as f64);

    Ok((bc.logdet_sum() + trace, report))
}
