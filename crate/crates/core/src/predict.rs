//! Posterior inference: predictive mean, per-point variance, confidence
//! bounds, and accuracy metrics.
//!
//! Prediction uses the same structured covariance the model was trained
//! with. The cross covariance to the test points is never materialized in
//! full: test points are processed in column chunks, each chunk solved with
//! the split-preconditioned batched CG.

use nalgebra::{DMatrix, DVector};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::kernel::{covar_dense, build_structured, Hyperparameters};
use crate::pcg::{batch_cg, CgConfig};
use crate::real::Real;
use crate::structured::{factorize_blocks, JitterPolicy, PreconditionedOperator, ShortcutKind};

/// Predictive moments with a two-standard-deviation confidence region.
/// Negative variances (possible through solver tolerance) are clamped to
/// zero and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub mean: DVector<T>,
    pub variance: DVector<T>,
    pub lower: DVector<T>,
    pub upper: DVector<T>,
    pub clamped_variances: usize,
}

impl<T: Real> Posterior<T> {
    /// Builds the confidence region `mean ∓ 2·√variance` from the moments.
    pub fn from_moments(mean: DVector<T>, variance: DVector<T>, clamped: usize) -> Self {
        let two = T::of_f64(2.0);
        let sd = variance.map(|v| v.sqrt());
        let lower = DVector::from_fn(mean.len(), |i, _| mean[i] - two * sd[i]);
        let upper = DVector::from_fn(mean.len(), |i, _| mean[i] + two * sd[i]);
        Self {
            mean,
            variance,
            lower,
            upper,
            clamped_variances: clamped,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PredictConfig<T> {
    pub cg: CgConfig<T>,
    /// Test points solved per batched CG call.
    pub chunk: usize,
    pub jitter: JitterPolicy<T>,
}

impl<T: Real> Default for PredictConfig<T> {
    fn default() -> Self {
        Self {
            cg: CgConfig::default(),
            chunk: 256,
            jitter: JitterPolicy::default(),
        }
    }
}

/// Iteration counts of every batched solve performed during inference.
#[derive(Debug, Clone, Default)]
pub struct PredictStats {
    pub solve_iterations: Vec<usize>,
}

impl PredictStats {
    pub fn max_iterations(&self) -> usize {
        self.solve_iterations.iter().copied().max().unwrap_or(0)
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.solve_iterations.is_empty() {
            return 0.0;
        }
        self.solve_iterations.iter().sum::<usize>() as f64 / self.solve_iterations.len() as f64
    }
}

/// Posterior mean and variance at `x_test` for a trained model.
///
/// The mean is `K*ᵀu` with `K·u = y` solved once; variances subtract
/// `K*(:,j)ᵀ·K⁻¹·K*(:,j)` chunk by chunk. A zero prior mean is assumed.
pub fn posterior<T: Real>(
    data: &ClusteredDataset<T>,
    x_test: &DMatrix<T>,
    hp: &Hyperparameters<T>,
    cfg: &PredictConfig<T>,
) -> Result<(Posterior<T>, PredictStats)> {
    if x_test.ncols() != data.d() {
        return Err(Error::shape(format!(
            "test inputs have dimension {}, training data has {}",
            x_test.ncols(),
            data.d()
        )));
    }
    if cfg.chunk == 0 {
        return Err(Error::usage("chunk width must be at least 1".to_string()));
    }
    let n_test = x_test.nrows();
    let mut stats = PredictStats::default();
    if n_test == 0 {
        return Ok((
            Posterior::from_moments(DVector::zeros(0), DVector::zeros(0), 0),
            stats,
        ));
    }

    let sk = build_structured(data, hp)?;
    let bc = factorize_blocks(&sk, &cfg.jitter)?;
    let op = PreconditionedOperator::new(&bc, &sk, ShortcutKind::Baseline)?;
    let n = data.n();

    // One solve for the training labels.
    let y = DMatrix::from_column_slice(n, 1, data.y_train().as_slice());
    let rhs = bc.apply_inv_rt(&y);
    let (u_tilde, report) = batch_cg(&op, &rhs, &cfg.cg);
    if !report.converged {
        return Err(Error::NonConvergence {
            max_iter: cfg.cg.max_iter,
            context: "posterior mean solve".to_string(),
        });
    }
    stats.solve_iterations.push(report.iterations);
    let u = bc.apply_inv_r(&u_tilde);

    let mut mean = DVector::zeros(n_test);
    let mut variance = DVector::zeros(n_test);
    let mut clamped = 0usize;
    let prior_var = hp.output_scale; // k(x, x) for the RBF kernel

    let mut start = 0;
    while start < n_test {
        let width = cfg.chunk.min(n_test - start);
        let chunk = x_test.rows(start, width).into_owned();
        let k_star = covar_dense(data.x_train(), &chunk, hp, false)?;

        for j in 0..width {
            mean[start + j] = k_star.column(j).dot(&u.column(0));
        }

        let rhs = bc.apply_inv_rt(&k_star);
        let (w_tilde, report) = batch_cg(&op, &rhs, &cfg.cg);
        if !report.converged {
            return Err(Error::NonConvergence {
                max_iter: cfg.cg.max_iter,
                context: format!("posterior variance solve (chunk at {start})"),
            });
        }
        stats.solve_iterations.push(report.iterations);
        let w = bc.apply_inv_r(&w_tilde);
        for j in 0..width {
            let v = prior_var - k_star.column(j).dot(&w.column(j));
            variance[start + j] = if v < T::zero() {
                clamped += 1;
                T::zero()
            } else {
                v
            };
        }
        start += width;
    }

    Ok((Posterior::from_moments(mean, variance, clamped), stats))
}

/// Root mean squared error `√((1/n)·Σ(mean_j − y_j)²)`.
pub fn rmse<T: Real>(predicted: &DVector<T>, truth: &DVector<T>) -> Result<T> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} entries, truth has {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::usage("RMSE of an empty prediction".to_string()));
    }
    let mut acc = T::zero();
    for i in 0..predicted.len() {
        let d = predicted[i] - truth[i];
        acc += d * d;
    }
    Ok((acc / T::of_f64(predicted.len() as f64)).sqrt())
}
