//! RBF kernel evaluation and covariance assembly.
//!
//! The kernel is `k(x, x') = α · exp(−‖x − x'‖₂ / (2λ²))` with the plain
//! (non-squared) Euclidean distance in the exponent. Covariance matrices come
//! in two layouts: fully dense (used by the oracle and for cross-covariances)
//! and cluster-structured (exact diagonal blocks plus a rank-1 model of every
//! off-diagonal block, see [`crate::structured`]).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::structured::StructuredKernel;

/// The three hyperparameters of the model: lengthscale λ, noise σ², and
/// output scale α. All strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters<T> {
    pub lengthscale: T,
    pub noise: T,
    pub output_scale: T,
}

impl<T: Real> Hyperparameters<T> {
    pub fn new(lengthscale: T, noise: T, output_scale: T) -> Result<Self> {
        let hp = Self {
            lengthscale,
            noise,
            output_scale,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscale <= T::zero() || self.noise <= T::zero() || self.output_scale <= T::zero()
        {
            return Err(Error::usage(format!(
                "hyperparameters must be strictly positive, got lengthscale = {}, noise = {}, output_scale = {}",
                self.lengthscale.as_f64(),
                self.noise.as_f64(),
                self.output_scale.as_f64()
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.lengthscale, self.noise, self.output_scale]
    }

    pub fn from_array(v: [T; 3]) -> Self {
        Self {
            lengthscale: v[0],
            noise: v[1],
            output_scale: v[2],
        }
    }

    /// Copy with the `index`-th parameter (lengthscale, noise, output scale)
    /// shifted by `delta`.
    pub fn perturbed(&self, index: usize, delta: T) -> Self {
        let mut v = self.as_array();
        v[index] += delta;
        Self::from_array(v)
    }
}

fn euclidean<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (a, b) in x.iter().zip(y.iter()) {
        let d = *a - *b;
        acc += d * d;
    }
    acc.sqrt()
}

/// Kernel value from a precomputed Euclidean distance.
#[inline]
pub fn kernel_from_distance<T: Real>(dist: T, hp: &Hyperparameters<T>) -> T {
    let two = T::of_f64(2.0);
    hp.output_scale * (-dist / (two * hp.lengthscale * hp.lengthscale)).exp()
}

/// Evaluates the kernel on a pair of points of equal dimension.
pub fn kernel_eval<T: Real>(x: &[T], x_prime: &[T], hp: &Hyperparameters<T>) -> Result<T> {
    if x.len() != x_prime.len() || x.is_empty() {
        return Err(Error::shape(format!(
            "kernel inputs must share a dimension d >= 1, got {} and {}",
            x.len(),
            x_prime.len()
        )));
    }
    Ok(kernel_from_distance(euclidean(x, x_prime), hp))
}

fn row_of<T: Real>(m: &DMatrix<T>, i: usize) -> Vec<T> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

/// Pairwise Euclidean distances between the rows of `a` and the rows of `b`.
///
/// Distances do not depend on the hyperparameters, so callers that evaluate
/// many hyperparameter settings on fixed data can reuse this matrix with
/// [`covar_from_distances`].
pub fn pairwise_distances<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::shape(format!(
            "sample sets must share a dimension d >= 1, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (na, nb, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = DMatrix::zeros(na, nb);
    // Column-parallel: each output column is written by exactly one thread,
    // so the result is identical for any thread count.
    out.as_mut_slice()
        .par_chunks_mut(na)
        .enumerate()
        .for_each(|(j, col)| {
            for (i, slot) in col.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..d {
                    let diff = a[(i, k)] - b[(j, k)];
                    acc += diff * diff;
                }
                *slot = acc.sqrt();
            }
        });
    Ok(out)
}

/// Dense covariance from a precomputed distance matrix. `add_noise` adds σ²
/// to the diagonal and is only meaningful when the distances are of a sample
/// set against itself.
pub fn covar_from_distances<T: Real>(
    dist: &DMatrix<T>,
    hp: &Hyperparameters<T>,
    add_noise: bool,
) -> Result<DMatrix<T>> {
    if add_noise && dist.nrows() != dist.ncols() {
        return Err(Error::usage(
            "add_noise requires a square self-covariance".to_string(),
        ));
    }
    let mut out = dist.map(|d| kernel_from_distance(d, hp));
    if add_noise {
        for i in 0..out.nrows() {
            out[(i, i)] += hp.noise;
        }
    }
    Ok(out)
}

/// Dense covariance between sample sets `a` (rows) and `b` (rows).
///
/// When `add_noise` is set, `a` and `b` must be the identical sample set; σ²
/// is then added to the diagonal. The self-covariance is assembled from its
/// upper triangle so the result is bitwise symmetric.
pub fn covar_dense<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    hp: &Hyperparameters<T>,
    add_noise: bool,
) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::shape(format!(
            "sample sets must share a dimension d >= 1, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if add_noise && a != b {
        return Err(Error::usage(
            "add_noise is only valid for the self-covariance of one sample set".to_string(),
        ));
    }
    if a == b {
        let n = a.nrows();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let xj = row_of(a, j);
            for i in 0..=j {
                let v = kernel_from_distance(euclidean(&row_of(a, i), &xj), hp);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        if add_noise {
            for i in 0..n {
                out[(i, i)] += hp.noise;
            }
        }
        Ok(out)
    } else {
        let dist = pairwise_distances(a, b)?;
        covar_from_distances(&dist, hp, false)
    }
}

/// Assembles the cluster-structured covariance of a dataset: per-cluster
/// diagonal blocks with noise, the representative covariance without noise,
/// and its smallest eigenvalue used as the compensation shift.
pub fn build_structured<T: Real>(
    data: &ClusteredDataset<T>,
    hp: &Hyperparameters<T>,
) -> Result<StructuredKernel<T>> {
    hp.validate()?;
    let (n_c, b) = (data.n_clusters(), data.cluster_size());
    let blocks: Vec<DMatrix<T>> = (0..n_c)
        .into_par_iter()
        .map(|i| {
            let cluster = data.cluster(i).into_owned();
            covar_dense(&cluster, &cluster, hp, true)
        })
        .collect::<Result<_>>()?;
    let k_rep = covar_dense(data.reps(), data.reps(), hp, false)?;
    StructuredKernel::new(blocks, k_rep, n_c, b)
}
