//! Batched conjugate gradient over an abstract SPD operator.
//!
//! All right-hand-side columns are iterated jointly so the operator is
//! applied to the whole batch once per iteration, while the CG coefficients
//! are tracked per column. Columns whose residual drops below the tolerance
//! are frozen (their updates skipped) while the batch continues.

use nalgebra::DMatrix;

use crate::real::Real;

/// An SPD linear map on n-vectors, applied to a whole batch of columns.
pub trait LinearOperator<T> {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DMatrix<T>) -> DMatrix<T>;
}

impl<T: Real> LinearOperator<T> for DMatrix<T> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &DMatrix<T>) -> DMatrix<T> {
        self * v
    }
}

/// Solver settings: per-column absolute residual tolerance and the iteration
/// budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for CgConfig<T> {
    fn default() -> Self {
        Self {
            tol: T::of_f64(0.01),
            max_iter: 2000,
        }
    }
}

/// Outcome of a batched solve. `converged` holds exactly when every column
/// residual norm is at or below the tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T> {
    pub iterations: usize,
    pub final_residual_norms: Vec<T>,
    pub converged: bool,
}

/// Solves `operator · X = B` column-wise with plain CG recurrences and a
/// zero initial guess.
///
/// Non-convergence is not an error here: the partial solution is returned
/// with `converged = false` and the caller decides severity.
pub fn batch_cg<T: Real, Op: LinearOperator<T> + ?Sized>(
    op: &Op,
    rhs: &DMatrix<T>,
    cfg: &CgConfig<T>,
) -> (DMatrix<T>, SolveReport<T>) {
    let (n, m) = (rhs.nrows(), rhs.ncols());
    assert_eq!(op.dim(), n, "operator dimension must match right-hand side");
    assert!(cfg.tol > T::zero(), "tolerance must be positive");

    let mut x = DMatrix::zeros(n, m);
    let mut r = rhs.clone_owned();
    let mut p = r.clone();
    let mut rho: Vec<T> = (0..m).map(|j| r.column(j).norm_squared()).collect();
    let tol_sq = cfg.tol * cfg.tol;
    let mut active: Vec<bool> = rho.iter().map(|&v| v > tol_sq).collect();
    let mut iterations = 0;

    while iterations < cfg.max_iter && active.iter().any(|&a| a) {
        let ap = op.apply(&p);
        iterations += 1;
        for j in 0..m {
            if !active[j] {
                continue;
            }
            let curvature = p.column(j).dot(&ap.column(j));
            let positive = curvature > T::zero();
            if !positive {
                // Breakdown (zero or NaN curvature): the operator is not SPD
                // on this column's Krylov space. Freeze the column and let
                // the report flag it.
                active[j] = false;
                continue;
            }
            let alpha = rho[j] / curvature;
            x.column_mut(j).axpy(alpha, &p.column(j), T::one());
            r.column_mut(j).axpy(-alpha, &ap.column(j), T::one());
            let rho_next = r.column(j).norm_squared();
            if rho_next <= tol_sq {
                active[j] = false;
                rho[j] = rho_next;
                continue;
            }
            let beta = rho_next / rho[j];
            let r_col = r.column(j).into_owned();
            p.column_mut(j).axpy(T::one(), &r_col, beta);
            rho[j] = rho_next;
        }
    }

    let final_residual_norms: Vec<T> = rho.iter().map(|&v| v.sqrt()).collect();
    let converged = final_residual_norms.iter().all(|&v| v <= cfg.tol);
    (
        x,
        SolveReport {
            iterations,
            final_residual_norms,
            converged,
        },
    )
}
