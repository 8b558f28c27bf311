//! The structured covariance operator and its block-Cholesky preconditioner.
//!
//! A covariance over `n_c` clusters of `b` points is encoded as
//!
//! * `diag_blocks`: the exact per-cluster covariance blocks with noise, and
//! * `k_rep`: the covariance between the cluster representatives, whose
//!   smallest eigenvalue `lambda0` is subtracted on the diagonal to form the
//!   coefficient matrix `M = k_rep − lambda0·I`.
//!
//! The encoded matrix is `K = blockdiag(diag_blocks) + M ⊗ 11ᵀ`: every
//! off-diagonal block `(i, j)` is the constant `k(r_i, r_j)`, and each
//! diagonal block is perturbed by `(k(r_i, r_i) − lambda0)·11ᵀ`. Since `M` is
//! positive semi-definite by construction, `K` is SPD whenever the diagonal
//! blocks are.
//!
//! The preconditioner is the block-diagonal matrix `R` of per-cluster upper
//! Cholesky factors, applied in split form: the solver works on
//! `A = R⁻ᵀ·K·R⁻¹`, which is the identity plus a rank-`n_c` term and
//! therefore has at most `n_c + 1` distinct eigenvalues. During gradient
//! steps the factors are reused while the covariance is perturbed; the
//! [`ShortcutKind`] variants select the cheap algebraic form of the
//! block-diagonal term for noise and output-scale steps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{covar_dense, Hyperparameters};
use crate::pcg::LinearOperator;
use crate::real::Real;

/// Cluster-structured covariance: exact noisy diagonal blocks plus the
/// representative covariance that models every off-diagonal block at rank 1.
#[derive(Debug, Clone)]
pub struct StructuredKernel<T> {
    diag_blocks: Arc<[DMatrix<T>]>,
    k_rep: DMatrix<T>,
    lambda0: T,
    n_c: usize,
    b: usize,
}

impl<T: Real> StructuredKernel<T> {
    /// Builds the encoding from explicit parts. `k_rep` must be symmetric;
    /// its smallest eigenvalue must be strictly positive.
    pub fn new(
        diag_blocks: Vec<DMatrix<T>>,
        k_rep: DMatrix<T>,
        n_c: usize,
        b: usize,
    ) -> Result<Self> {
        if n_c == 0 || b == 0 || diag_blocks.len() != n_c {
            return Err(Error::shape(format!(
                "expected {} diagonal blocks, got {}",
                n_c,
                diag_blocks.len()
            )));
        }
        for (i, block) in diag_blocks.iter().enumerate() {
            if block.nrows() != b || block.ncols() != b {
                return Err(Error::shape(format!(
                    "diagonal block {} is {}x{}, expected {}x{}",
                    i,
                    block.nrows(),
                    block.ncols(),
                    b,
                    b
                )));
            }
        }
        if k_rep.nrows() != n_c || k_rep.ncols() != n_c {
            return Err(Error::shape(format!(
                "representative covariance is {}x{}, expected {}x{}",
                k_rep.nrows(),
                k_rep.ncols(),
                n_c,
                n_c
            )));
        }
        let lambda0 = smallest_eig(&k_rep);
        if lambda0 <= T::zero() {
            return Err(Error::DegenerateRepresentatives {
                lambda0: lambda0.as_f64(),
            });
        }
        Ok(Self {
            diag_blocks: diag_blocks.into(),
            k_rep,
            lambda0,
            n_c,
            b,
        })
    }

    /// Same diagonal blocks, off-diagonal data recomputed from `reps` at the
    /// given hyperparameters. Used by gradient steps that leave the diagonal
    /// representable in terms of the baseline factors.
    pub fn with_offdiag(&self, reps: &DMatrix<T>, hp: &Hyperparameters<T>) -> Result<Self> {
        if reps.nrows() != self.n_c {
            return Err(Error::shape(format!(
                "expected {} representatives, got {}",
                self.n_c,
                reps.nrows()
            )));
        }
        let k_rep = covar_dense(reps, reps, hp, false)?;
        let lambda0 = smallest_eig(&k_rep);
        if lambda0 <= T::zero() {
            return Err(Error::DegenerateRepresentatives {
                lambda0: lambda0.as_f64(),
            });
        }
        Ok(Self {
            diag_blocks: Arc::clone(&self.diag_blocks),
            k_rep,
            lambda0,
            n_c: self.n_c,
            b: self.b,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_c
    }

    pub fn cluster_size(&self) -> usize {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n_c * self.b
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<T> {
        &self.diag_blocks[i]
    }

    pub fn diag_blocks(&self) -> &[DMatrix<T>] {
        &self.diag_blocks
    }

    pub fn k_rep(&self) -> &DMatrix<T> {
        &self.k_rep
    }

    pub fn lambda0(&self) -> T {
        self.lambda0
    }

    /// Off-diagonal coefficient matrix `M = k_rep − lambda0·I`. Entry (i, j)
    /// scales the all-ones block between clusters i and j; the diagonal
    /// carries the compensation `k(r_i, r_i) − lambda0`.
    pub fn coeff_matrix(&self) -> DMatrix<T> {
        let mut m = self.k_rep.clone();
        for i in 0..self.n_c {
            m[(i, i)] -= self.lambda0;
        }
        m
    }

    /// Number of stored matrix-content values: `n_c·b²` for the diagonal
    /// blocks, `n_c²` for the representative covariance, and `n_c` for the
    /// per-cluster compensation diagonal.
    pub fn storage_count(&self) -> usize {
        Self::storage_count_for(self.n_c, self.b)
    }

    pub fn storage_count_for(n_c: usize, b: usize) -> usize {
        n_c * b * b + n_c * n_c + n_c
    }
}

/// Algebraically smallest eigenvalue of a symmetric matrix, computed by a
/// dense symmetric eigensolver.
pub fn smallest_eig<T: Real>(m: &DMatrix<T>) -> T {
    nalgebra::linalg::SymmetricEigen::new(m.clone())
        .eigenvalues
        .min()
}

/// Jitter escalation used when a diagonal block fails to factorize: retry `k`
/// adds `initial_scale · growth^(k−1) · mean(diag)` to the diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy<T> {
    pub initial_scale: T,
    pub growth: T,
    pub max_retries: usize,
}

impl<T: Real> Default for JitterPolicy<T> {
    fn default() -> Self {
        Self {
            initial_scale: T::of_f64(1e-8),
            growth: T::of_f64(10.0),
            max_retries: 5,
        }
    }
}

/// Per-cluster upper Cholesky factors of the diagonal blocks, with the data
/// reused by every preconditioned application: the summed log-determinant and
/// the vectors `u_i = R_i⁻ᵀ·1`.
#[derive(Debug, Clone)]
pub struct BlockCholesky<T> {
    factors: Vec<DMatrix<T>>,
    logdet_sum: T,
    u_vectors: Vec<DVector<T>>,
    total_jitter: T,
    n_c: usize,
    b: usize,
}

impl<T: Real> BlockCholesky<T> {
    pub fn factor(&self, i: usize) -> &DMatrix<T> {
        &self.factors[i]
    }

    /// `2·Σ_i log|R_i|`, i.e. the log-determinant of the factored
    /// block-diagonal matrix.
    pub fn logdet_sum(&self) -> T {
        self.logdet_sum
    }

    pub fn u_vector(&self, i: usize) -> &DVector<T> {
        &self.u_vectors[i]
    }

    /// Total diagonal jitter that was needed across blocks (zero when every
    /// block factorized cleanly).
    pub fn total_jitter(&self) -> T {
        self.total_jitter
    }

    pub fn n_clusters(&self) -> usize {
        self.n_c
    }

    pub fn cluster_size(&self) -> usize {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n_c * self.b
    }

    /// `R⁻¹·D` via per-block back-substitution.
    pub fn apply_inv_r(&self, d: &DMatrix<T>) -> DMatrix<T> {
        self.map_blocks(d, |factor, block| {
            factor
                .solve_upper_triangular(&block)
                .expect("factor diagonal is positive")
        })
    }

    /// `R⁻ᵀ·D` via per-block forward substitution.
    pub fn apply_inv_rt(&self, d: &DMatrix<T>) -> DMatrix<T> {
        self.map_blocks(d, |factor, block| {
            factor
                .tr_solve_upper_triangular(&block)
                .expect("factor diagonal is positive")
        })
    }

    fn map_blocks(
        &self,
        d: &DMatrix<T>,
        f: impl Fn(&DMatrix<T>, DMatrix<T>) -> DMatrix<T> + Sync,
    ) -> DMatrix<T> {
        debug_assert_eq!(d.nrows(), self.n());
        let b = self.b;
        let parts: Vec<DMatrix<T>> = (0..self.n_c)
            .into_par_iter()
            .map(|i| f(&self.factors[i], d.rows(i * b, b).into_owned()))
            .collect();
        stack_blocks(&parts, b, d.ncols())
    }
}

fn stack_blocks<T: Real>(parts: &[DMatrix<T>], b: usize, ncols: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(parts.len() * b, ncols);
    for (i, part) in parts.iter().enumerate() {
        out.rows_mut(i * b, b).copy_from(part);
    }
    out
}

fn factorize_one<T: Real>(
    block: &DMatrix<T>,
    policy: &JitterPolicy<T>,
) -> Option<(DMatrix<T>, T)> {
    let mean_diag = block.diagonal().mean();
    let mut jitter = T::zero();
    for retry in 0..=policy.max_retries {
        let mut attempt = block.clone();
        if retry > 0 {
            jitter = mean_diag * policy.initial_scale * policy.growth.powi(retry as i32 - 1);
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = nalgebra::linalg::Cholesky::new(attempt) {
            return Some((chol.l().transpose(), jitter));
        }
    }
    None
}

/// Cholesky-factorizes every diagonal block, escalating diagonal jitter on
/// failure per `policy`. Also precomputes the log-determinant sum and the
/// `u_i` vectors.
pub fn factorize_blocks<T: Real>(
    sk: &StructuredKernel<T>,
    policy: &JitterPolicy<T>,
) -> Result<BlockCholesky<T>> {
    let b = sk.cluster_size();
    let factored: Vec<Option<(DMatrix<T>, T)>> = (0..sk.n_clusters())
        .into_par_iter()
        .map(|i| factorize_one(sk.diag_block(i), policy))
        .collect();

    let mut factors = Vec::with_capacity(sk.n_clusters());
    let mut total_jitter = T::zero();
    for (i, item) in factored.into_iter().enumerate() {
        match item {
            Some((factor, jitter)) => {
                if jitter > T::zero() {
                    log::debug!("block {i} factorized with jitter {:e}", jitter.as_f64());
                }
                total_jitter += jitter;
                factors.push(factor);
            }
            None => {
                return Err(Error::Factorization {
                    block: i,
                    retries: policy.max_retries,
                })
            }
        }
    }

    let mut logdet_sum = T::zero();
    for factor in &factors {
        for j in 0..b {
            logdet_sum += factor[(j, j)].ln();
        }
    }
    logdet_sum *= T::of_f64(2.0);

    let ones = DMatrix::from_element(b, 1, T::one());
    let u_vectors = factors
        .iter()
        .map(|factor| {
            DVector::from_column_slice(
                factor
                    .tr_solve_upper_triangular(&ones)
                    .expect("factor diagonal is positive")
                    .as_slice(),
            )
        })
        .collect();

    Ok(BlockCholesky {
        factors,
        logdet_sum,
        u_vectors,
        total_jitter,
        n_c: sk.n_clusters(),
        b,
    })
}

/// How the block-diagonal term of a preconditioned application relates to the
/// factored baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShortcutKind<T> {
    /// Hyperparameters match the factorization: the block-diagonal term is
    /// the input itself.
    Baseline,
    /// Noise stepped by `delta_noise`: the term is `D + Δσ²·R⁻ᵀR⁻¹D`.
    NoiseStep { delta_noise: T },
    /// Output scale stepped by `delta_scale` from `base_scale` with baseline
    /// noise `base_noise`: the term is `(1+r)·D − σ²·r·R⁻ᵀR⁻¹D` with
    /// `r = Δα/α`.
    ScaleStep {
        delta_scale: T,
        base_scale: T,
        base_noise: T,
    },
    /// No algebraic relation (lengthscale steps): the full triple product
    /// `R⁻ᵀ·K_diag'·R⁻¹·D` with the kernel's own diagonal blocks.
    Generic,
}

fn validate_shortcut<T: Real>(
    bc: &BlockCholesky<T>,
    sk: &StructuredKernel<T>,
    shortcut: &ShortcutKind<T>,
) -> Result<()> {
    if bc.n_clusters() != sk.n_clusters() || bc.cluster_size() != sk.cluster_size() {
        return Err(Error::usage(format!(
            "preconditioner ({} clusters of {}) does not match kernel ({} clusters of {})",
            bc.n_clusters(),
            bc.cluster_size(),
            sk.n_clusters(),
            sk.cluster_size()
        )));
    }
    match *shortcut {
        ShortcutKind::ScaleStep {
            delta_scale,
            base_scale,
            base_noise,
        } => {
            if base_scale <= T::zero() || base_noise <= T::zero() {
                return Err(Error::usage(
                    "scale shortcut requires positive baseline scale and noise".to_string(),
                ));
            }
            if T::one() + delta_scale / base_scale <= T::zero() {
                return Err(Error::usage(
                    "scale shortcut step drives the output scale non-positive".to_string(),
                ));
            }
        }
        ShortcutKind::NoiseStep { delta_noise } => {
            if !delta_noise.is_finite() {
                return Err(Error::usage("noise shortcut step must be finite".to_string()));
            }
        }
        ShortcutKind::Baseline | ShortcutKind::Generic => {}
    }
    Ok(())
}

/// Per-cluster row sums of `v` weighted by `weights`: row `j` of the result
/// is `w_jᵀ·V_j` where `V_j` is the j-th row block. With unit weights this is
/// the per-cluster column sum.
fn cluster_weighted_sums<T: Real>(
    v: &DMatrix<T>,
    weights: Option<&[DVector<T>]>,
    n_c: usize,
    b: usize,
) -> DMatrix<T> {
    let m = v.ncols();
    let mut s = DMatrix::zeros(n_c, m);
    for j in 0..n_c {
        for col in 0..m {
            let mut acc = T::zero();
            for r in 0..b {
                let w = match weights {
                    Some(u) => u[j][r],
                    None => T::one(),
                };
                acc += w * v[(j * b + r, col)];
            }
            s[(j, col)] = acc;
        }
    }
    s
}

/// `K·V` for the structured covariance, evaluated without densifying:
/// per-block multiplies for the diagonal plus a rank-1 broadcast of the
/// coefficient matrix for everything off-diagonal.
pub fn apply_structured<T: Real>(sk: &StructuredKernel<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
    if v.nrows() != sk.n() || v.ncols() == 0 {
        return Err(Error::shape(format!(
            "operand is {}x{}, expected {} rows and at least one column",
            v.nrows(),
            v.ncols(),
            sk.n()
        )));
    }
    let (n_c, b) = (sk.n_clusters(), sk.cluster_size());
    let s = cluster_weighted_sums(v, None, n_c, b);
    let t = sk.coeff_matrix() * s;
    let parts: Vec<DMatrix<T>> = (0..n_c)
        .into_par_iter()
        .map(|i| {
            let mut block = sk.diag_block(i) * v.rows(i * b, b);
            for col in 0..block.ncols() {
                let ti = t[(i, col)];
                for r in 0..b {
                    block[(r, col)] += ti;
                }
            }
            block
        })
        .collect();
    Ok(stack_blocks(&parts, b, v.ncols()))
}

/// `R⁻ᵀ·K'·R⁻¹·D` where `K'` is the structured covariance at possibly
/// perturbed hyperparameters and `R` is the baseline factorization.
///
/// The off-diagonal term always reduces to the precomputed `u_i` vectors:
/// cluster sums `s_j = u_jᵀ·D_j`, coefficients `t = M'·s`, contribution
/// `u_i·t_i` per cluster. The block-diagonal term is selected by `shortcut`;
/// `sk` must carry the off-diagonal data (`k_rep`, `lambda0`) at the
/// perturbed hyperparameters, and for [`ShortcutKind::Generic`] also the
/// perturbed diagonal blocks.
pub fn apply_preconditioned<T: Real>(
    bc: &BlockCholesky<T>,
    sk: &StructuredKernel<T>,
    d: &DMatrix<T>,
    shortcut: &ShortcutKind<T>,
) -> Result<DMatrix<T>> {
    validate_shortcut(bc, sk, shortcut)?;
    if d.nrows() != sk.n() || d.ncols() == 0 {
        return Err(Error::shape(format!(
            "operand is {}x{}, expected {} rows and at least one column",
            d.nrows(),
            d.ncols(),
            sk.n()
        )));
    }
    let (n_c, b) = (sk.n_clusters(), sk.cluster_size());

    let mut out = match *shortcut {
        ShortcutKind::Baseline => d.clone_owned(),
        ShortcutKind::NoiseStep { delta_noise } => {
            let rinv = bc.apply_inv_r(d);
            let rt = bc.apply_inv_rt(&rinv);
            d + rt * delta_noise
        }
        ShortcutKind::ScaleStep {
            delta_scale,
            base_scale,
            base_noise,
        } => {
            let ratio = delta_scale / base_scale;
            let rinv = bc.apply_inv_r(d);
            let rt = bc.apply_inv_rt(&rinv);
            d * (T::one() + ratio) - rt * (base_noise * ratio)
        }
        ShortcutKind::Generic => {
            let rinv = bc.apply_inv_r(d);
            let parts: Vec<DMatrix<T>> = (0..n_c)
                .into_par_iter()
                .map(|i| sk.diag_block(i) * rinv.rows(i * b, b))
                .collect();
            bc.apply_inv_rt(&stack_blocks(&parts, b, d.ncols()))
        }
    };

    // Off-diagonal rank-1 term, shared by every shortcut.
    let u: Vec<DVector<T>> = (0..n_c).map(|i| bc.u_vector(i).clone()).collect();
    let s = cluster_weighted_sums(d, Some(&u), n_c, b);
    let t = sk.coeff_matrix() * s;
    for i in 0..n_c {
        let ui = bc.u_vector(i);
        for col in 0..d.ncols() {
            let ti = t[(i, col)];
            for r in 0..b {
                out[(i * b + r, col)] += ui[r] * ti;
            }
        }
    }
    Ok(out)
}

/// The preconditioned operator `A = R⁻ᵀ·K'·R⁻¹` as a reusable SPD linear map
/// for the batched CG solver.
pub struct PreconditionedOperator<'a, T> {
    bc: &'a BlockCholesky<T>,
    sk: &'a StructuredKernel<T>,
    shortcut: ShortcutKind<T>,
}

impl<'a, T: Real> PreconditionedOperator<'a, T> {
    pub fn new(
        bc: &'a BlockCholesky<T>,
        sk: &'a StructuredKernel<T>,
        shortcut: ShortcutKind<T>,
    ) -> Result<Self> {
        validate_shortcut(bc, sk, &shortcut)?;
        Ok(Self { bc, sk, shortcut })
    }

    pub fn shortcut(&self) -> &ShortcutKind<T> {
        &self.shortcut
    }
}

impl<T: Real> LinearOperator<T> for PreconditionedOperator<'_, T> {
    fn dim(&self) -> usize {
        self.sk.n()
    }

    fn apply(&self, v: &DMatrix<T>) -> DMatrix<T> {
        apply_preconditioned(self.bc, self.sk, v, &self.shortcut)
            .expect("operator validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_1d, sample_uniform, seeded_rng};
    use crate::kernel::build_structured;
    use crate::oracle;
    use approx::assert_relative_eq;

    fn hp(l: f64, s: f64, a: f64) -> Hyperparameters<f64> {
        Hyperparameters::new(l, s, a).unwrap()
    }

    fn random_instance(
        n_c: usize,
        b: usize,
        seed: u64,
    ) -> (crate::data::ClusteredDataset<f64>, Hyperparameters<f64>) {
        let mut rng = seeded_rng(seed);
        let data = gen_1d::<f64>(n_c, b, 0.2, 0.4, seed).unwrap();
        let h = hp(
            sample_uniform(&mut rng, 0.5, 2.0),
            sample_uniform(&mut rng, 0.05, 0.5),
            sample_uniform(&mut rng, 0.5, 2.0),
        );
        (data, h)
    }

    #[test]
    fn smallest_eig_identity() {
        let m = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(smallest_eig(&m), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn smallest_eig_two_by_two_closed_form() {
        for &(a, c) in &[(2.0f64, 0.5f64), (1.0, -0.75), (3.0, 2.0)] {
            let m = DMatrix::from_row_slice(2, 2, &[a, c, c, a]);
            assert_relative_eq!(smallest_eig(&m), a - c.abs(), max_relative = 1e-12);
        }
    }

    #[test]
    fn smallest_eig_collinear_representatives() {
        // Three equidistant 1-D representatives give a symmetric Toeplitz
        // K_rep [[a,b,c],[b,a,b],[c,b,a]] whose eigenvalues have closed
        // forms: a - c and a + c/2 ± sqrt(c²+8b²)/2... derived from the
        // (1, t, 1) eigenvector family.
        let h = hp(1.0, 0.1, 1.0);
        let a = 1.0f64;
        let b = (-1.0f64 / 2.0).exp(); // distance 1
        let c = (-2.0f64 / 2.0).exp(); // distance 2
        let reps = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let k_rep = covar_dense(&reps, &reps, &h, false).unwrap();

        let disc = (c * c + 8.0 * b * b).sqrt();
        let eigs = [a - c, a + (c + disc) / 2.0, a + (c - disc) / 2.0];
        let expect = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(smallest_eig(&k_rep), expect, max_relative = 1e-12);
    }

    #[test]
    fn factorize_scalar_block() {
        let sk = StructuredKernel::new(
            vec![DMatrix::from_row_slice(1, 1, &[4.0])],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            1,
            1,
        )
        .unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        assert_relative_eq!(bc.factor(0)[(0, 0)], 2.0, max_relative = 1e-15);
        assert_relative_eq!(bc.logdet_sum(), 2.0 * 2.0f64.ln(), max_relative = 1e-15);
        assert_eq!(bc.total_jitter(), 0.0);
    }

    #[test]
    fn factorize_hand_cholesky() {
        let block = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let sk = StructuredKernel::new(
            vec![block.clone()],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            1,
            2,
        )
        .unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let r = bc.factor(0);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert_relative_eq!(r, &expect, max_relative = 1e-14);
        assert_relative_eq!(r.transpose() * r, block, max_relative = 1e-14);
        assert_relative_eq!(bc.logdet_sum(), 4.0 * 2.0f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn factorize_negative_definite_fails() {
        let sk = StructuredKernel::new(
            vec![-DMatrix::<f64>::identity(3, 3)],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            1,
            3,
        )
        .unwrap();
        match factorize_blocks(&sk, &JitterPolicy::default()) {
            Err(Error::Factorization { block, retries }) => {
                assert_eq!(block, 0);
                assert_eq!(retries, 5);
            }
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }

    #[test]
    fn factorize_singular_block_needs_jitter() {
        // Exactly singular PSD block: plain Cholesky fails, jitter rescues.
        let block = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let sk = StructuredKernel::new(
            vec![block],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            1,
            2,
        )
        .unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        assert!(bc.total_jitter() > 0.0);
    }

    #[test]
    fn factors_reconstruct_blocks_and_u_vectors() {
        let (data, h) = random_instance(3, 5, 42);
        let sk = build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let ones = DVector::from_element(5, 1.0);
        for i in 0..3 {
            let r = bc.factor(i);
            assert_relative_eq!(r.transpose() * r, sk.diag_block(i), max_relative = 1e-6);
            for j in 0..5 {
                assert!(r[(j, j)] > 0.0);
            }
            // R_i^T u_i = 1
            assert_relative_eq!(r.transpose() * bc.u_vector(i), ones, max_relative = 1e-10);
        }
    }

    #[test]
    fn apply_structured_zero_input() {
        let (data, h) = random_instance(2, 4, 7);
        let sk = build_structured(&data, &h).unwrap();
        let v = DMatrix::zeros(8, 3);
        let out = apply_structured(&sk, &v).unwrap();
        assert_eq!(out, DMatrix::zeros(8, 3));
    }

    #[test]
    fn apply_structured_single_cluster_is_block_multiply() {
        let (data, h) = random_instance(1, 6, 8);
        let sk = build_structured(&data, &h).unwrap();
        let mut rng = seeded_rng(9);
        let v = DMatrix::from_fn(6, 2, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
        let out = apply_structured(&sk, &v).unwrap();
        let expect = sk.diag_block(0) * &v;
        assert_relative_eq!(out, expect, max_relative = 1e-14);
    }

    #[test]
    fn apply_structured_matches_dense() {
        let (data, h) = random_instance(2, 2, 10);
        let sk = build_structured(&data, &h).unwrap();
        let dense = oracle::densify(&sk);
        let mut rng = seeded_rng(11);
        let v = DMatrix::from_fn(4, 3, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
        let out = apply_structured(&sk, &v).unwrap();
        let expect = &dense * &v;
        assert_relative_eq!(out, expect, max_relative = 1e-10);
    }

    #[test]
    fn apply_structured_is_linear() {
        let (data, h) = random_instance(3, 4, 12);
        let sk = build_structured(&data, &h).unwrap();
        let mut rng = seeded_rng(13);
        let v1 = DMatrix::from_fn(12, 2, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
        let v2 = DMatrix::from_fn(12, 2, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
        let (a, b) = (0.7, -1.3);
        let lhs = apply_structured(&sk, &(&v1 * a + &v2 * b)).unwrap();
        let rhs = apply_structured(&sk, &v1).unwrap() * a + apply_structured(&sk, &v2).unwrap() * b;
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10, epsilon = 1e-12);
    }

    #[test]
    fn baseline_shortcut_single_cluster_is_identity() {
        let (data, h) = random_instance(1, 5, 14);
        let sk = build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let mut rng = seeded_rng(15);
        let d = DMatrix::from_fn(5, 3, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
        let out = apply_preconditioned(&bc, &sk, &d, &ShortcutKind::Baseline).unwrap();
        // M = [[0]] so the off-diagonal term vanishes and the output is D.
        assert_relative_eq!(out, d, max_relative = 1e-14);
    }

    #[test]
    fn noise_shortcut_matches_generic() {
        for seed in 0..5 {
            let (data, h) = random_instance(2, 4, 20 + seed);
            let sk = build_structured(&data, &h).unwrap();
            let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
            let delta = 0.037;
            let hp_prime = h.perturbed(1, delta);
            let perturbed = build_structured(&data, &hp_prime).unwrap();
            let mut rng = seeded_rng(100 + seed);
            let d = DMatrix::from_fn(8, 2, |_, _| sample_uniform(&mut rng, -1.0, 1.0));

            let fast_sk = sk.with_offdiag(data.reps(), &hp_prime).unwrap();
            let fast = apply_preconditioned(
                &bc,
                &fast_sk,
                &d,
                &ShortcutKind::NoiseStep { delta_noise: delta },
            )
            .unwrap();
            let slow = apply_preconditioned(&bc, &perturbed, &d, &ShortcutKind::Generic).unwrap();
            assert_relative_eq!(fast, slow, max_relative = 1e-10);
        }
    }

    #[test]
    fn scale_shortcut_matches_generic() {
        for seed in 0..5 {
            let (data, h) = random_instance(2, 4, 30 + seed);
            let sk = build_structured(&data, &h).unwrap();
            let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
            let delta = 0.11;
            let hp_prime = h.perturbed(2, delta);
            let perturbed = build_structured(&data, &hp_prime).unwrap();
            let mut rng = seeded_rng(200 + seed);
            let d = DMatrix::from_fn(8, 2, |_, _| sample_uniform(&mut rng, -1.0, 1.0));

            let fast_sk = sk.with_offdiag(data.reps(), &hp_prime).unwrap();
            let fast = apply_preconditioned(
                &bc,
                &fast_sk,
                &d,
                &ShortcutKind::ScaleStep {
                    delta_scale: delta,
                    base_scale: h.output_scale,
                    base_noise: h.noise,
                },
            )
            .unwrap();
            let slow = apply_preconditioned(&bc, &perturbed, &d, &ShortcutKind::Generic).unwrap();
            assert_relative_eq!(fast, slow, max_relative = 1e-10);
        }
    }

    #[test]
    fn preconditioned_operator_is_identity_plus_offdiag() {
        let (data, h) = random_instance(4, 8, 40);
        let sk = build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let n = sk.n();
        let dense_a =
            apply_preconditioned(&bc, &sk, &DMatrix::identity(n, n), &ShortcutKind::Baseline)
                .unwrap();

        // I + R^{-T} K_offdiag' R^{-1} assembled from u_i and M.
        let m = sk.coeff_matrix();
        let mut expect = DMatrix::<f64>::identity(n, n);
        let b = sk.cluster_size();
        for i in 0..4 {
            for j in 0..4 {
                let scale = m[(i, j)];
                let ui = bc.u_vector(i);
                let uj = bc.u_vector(j);
                for r in 0..b {
                    for c in 0..b {
                        expect[(i * b + r, j * b + c)] += scale * ui[r] * uj[c];
                    }
                }
            }
        }
        assert_relative_eq!(dense_a, expect, max_relative = 1e-8, epsilon = 1e-10);
    }

    #[test]
    fn preconditioned_operator_has_few_distinct_eigenvalues() {
        let (data, h) = random_instance(8, 32, 41);
        let sk = build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let n = sk.n();
        let dense_a =
            apply_preconditioned(&bc, &sk, &DMatrix::identity(n, n), &ShortcutKind::Baseline)
                .unwrap();
        let sym = (&dense_a + dense_a.transpose()) * 0.5;
        let mut eigs: Vec<f64> = nalgebra::linalg::SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        eigs.sort_by(f64::total_cmp);
        let mut distinct = 1;
        for w in eigs.windows(2) {
            if (w[1] - w[0]).abs() > 1e-6 {
                distinct += 1;
            }
        }
        assert!(
            distinct <= 8 + 1,
            "expected at most n_c + 1 distinct eigenvalues, found {distinct}"
        );
    }

    #[test]
    fn lambda0_matches_recomputed_eigenvalue_and_coeff_is_psd() {
        let (data, h) = random_instance(5, 6, 60);
        let sk = build_structured(&data, &h).unwrap();
        let recomputed = smallest_eig(sk.k_rep());
        assert!(
            ((sk.lambda0() - recomputed) / recomputed).abs() <= 1e-10,
            "stored lambda0 {} vs recomputed {}",
            sk.lambda0(),
            recomputed
        );
        // M = k_rep - lambda0 I is positive semi-definite by construction.
        let min_eig = smallest_eig(&sk.coeff_matrix());
        assert!(min_eig >= -1e-12, "coefficient matrix has eigenvalue {min_eig}");
    }

    #[test]
    fn block_operations_are_bit_identical_across_thread_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let (data, h) = random_instance(4, 16, 61);
                let sk = build_structured(&data, &h).unwrap();
                let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
                let mut rng = seeded_rng(62);
                let d = DMatrix::from_fn(64, 5, |_, _| sample_uniform(&mut rng, -1.0, 1.0));
                let a = apply_structured(&sk, &d).unwrap();
                let b = apply_preconditioned(&bc, &sk, &d, &ShortcutKind::Baseline).unwrap();
                (a, b)
            })
        };
        let single = run(1);
        let multi = run(4);
        assert_eq!(single.0, multi.0);
        assert_eq!(single.1, multi.1);
    }

    #[test]
    fn shortcut_validation_catches_mismatch() {
        let (data, h) = random_instance(2, 4, 50);
        let sk = build_structured(&data, &h).unwrap();
        let bc = factorize_blocks(&sk, &JitterPolicy::default()).unwrap();
        let (data2, h2) = random_instance(4, 2, 51);
        let sk2 = build_structured(&data2, &h2).unwrap();
        let d = DMatrix::zeros(8, 1);
        assert!(matches!(
            apply_preconditioned(&bc, &sk2, &d, &ShortcutKind::Baseline),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            apply_preconditioned(
                &bc,
                &sk,
                &d,
                &ShortcutKind::ScaleStep {
                    delta_scale: -2.0,
                    base_scale: 1.0,
                    base_noise: 0.1
                }
            ),
            Err(Error::Usage(_))
        ));
    }
}
