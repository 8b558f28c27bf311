//! Datasets: synthetic generators, clustering of external data,
//! representative selection, and array-file IO.

mod bundle;
mod npy;

pub use bundle::{read_bundle, write_bundle, Bundle, Manifest};
pub use npy::{read_npy, write_npy, NpyArray};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{kernel_eval, Hyperparameters};
use crate::real::Real;

/// Deterministic RNG used for all generation in this crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample in `[lo, hi)`. Sampling is always done in f64 so streams
/// are identical across precisions.
pub fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Normal sample with the given mean and standard deviation.
pub fn sample_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Seeded Fisher-Yates shuffle.
pub fn shuffle<R: Rng, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// A training set ordered cluster-contiguously (rows `[i·b, (i+1)·b)` belong
/// to cluster `i`), one representative row per cluster, and a held-out test
/// set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset<T> {
    x_train: DMatrix<T>,
    y_train: DVector<T>,
    reps: DMatrix<T>,
    b: usize,
    n_c: usize,
    x_test: DMatrix<T>,
    y_test: DVector<T>,
}

impl<T: Real> ClusteredDataset<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_train: DMatrix<T>,
        y_train: DVector<T>,
        reps: DMatrix<T>,
        n_c: usize,
        b: usize,
        x_test: DMatrix<T>,
        y_test: DVector<T>,
    ) -> Result<Self> {
        if n_c == 0 || b == 0 {
            return Err(Error::shape("need n_c >= 1 and b >= 1".to_string()));
        }
        let d = x_train.ncols();
        if d == 0 {
            return Err(Error::shape("training inputs need dimension d >= 1".to_string()));
        }
        if x_train.nrows() != n_c * b {
            return Err(Error::shape(format!(
                "training rows ({}) must equal n_c * b = {} * {} exactly",
                x_train.nrows(),
                n_c,
                b
            )));
        }
        if y_train.len() != x_train.nrows() {
            return Err(Error::shape(format!(
                "training labels ({}) must match training rows ({})",
                y_train.len(),
                x_train.nrows()
            )));
        }
        if reps.nrows() != n_c || reps.ncols() != d {
            return Err(Error::shape(format!(
                "representatives must be {}x{}, got {}x{}",
                n_c,
                d,
                reps.nrows(),
                reps.ncols()
            )));
        }
        if x_test.ncols() != d {
            return Err(Error::shape(format!(
                "test inputs have dimension {}, expected {}",
                x_test.ncols(),
                d
            )));
        }
        if y_test.len() != x_test.nrows() {
            return Err(Error::shape(format!(
                "test labels ({}) must match test rows ({})",
                y_test.len(),
                x_test.nrows()
            )));
        }
        Ok(Self {
            x_train,
            y_train,
            reps,
            b,
            n_c,
            x_test,
            y_test,
        })
    }

    pub fn n(&self) -> usize {
        self.n_c * self.b
    }

    pub fn d(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_c
    }

    pub fn cluster_size(&self) -> usize {
        self.b
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn x_train(&self) -> &DMatrix<T> {
        &self.x_train
    }

    pub fn y_train(&self) -> &DVector<T> {
        &self.y_train
    }

    pub fn reps(&self) -> &DMatrix<T> {
        &self.reps
    }

    pub fn x_test(&self) -> &DMatrix<T> {
        &self.x_test
    }

    pub fn y_test(&self) -> &DVector<T> {
        &self.y_test
    }

    /// View of the rows of cluster `i`.
    pub fn cluster(&self, i: usize) -> nalgebra::DMatrixView<'_, T> {
        self.x_train.rows(i * self.b, self.b)
    }
}

/// Target function of the 1-D synthetic dataset.
pub fn f_1d(x: f64) -> f64 {
    (2.0 * x).sin() / x
}

/// Target function of the 3-D synthetic dataset.
pub fn f_3d(x: &[f64]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 100.0
}

/// 1-D synthetic dataset: representatives at 1, 2, ..., n_c (unit spacing,
/// away from the pole of the target at 0), `b` points uniform within
/// `radius` of each, labels `f(x) + ε` with `ε ~ N(0, noise_sd²)`. Test
/// inputs are uniform on an interval slightly wider than the training range,
/// test labels carry the same noise.
pub fn gen_1d<T: Real>(
    n_c: usize,
    b: usize,
    radius: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<ClusteredDataset<T>> {
    if n_c == 0 || b == 0 {
        return Err(Error::usage("need n_c >= 1 and b >= 1".to_string()));
    }
    if !radius.is_finite() || radius <= 0.0 || !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(Error::usage(
            "radius must be positive and noise_sd non-negative".to_string(),
        ));
    }
    // Representatives are spaced 1.0 apart; clusters of the given radius
    // stay disjoint only below half the spacing.
    if 1.0 <= 2.0 * radius {
        return Err(Error::Overlap(format!(
            "cluster radius {radius} >= half the representative spacing 1.0"
        )));
    }

    let mut rng = seeded_rng(seed);
    let reps_x: Vec<f64> = (0..n_c).map(|i| 1.0 + i as f64).collect();

    let n = n_c * b;
    let mut xs = Vec::with_capacity(n);
    for &r in &reps_x {
        for _ in 0..b {
            xs.push(r + sample_uniform(&mut rng, -radius, radius));
        }
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| f_1d(x) + sample_normal(&mut rng, 0.0, noise_sd))
        .collect();

    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let (m1, m2) = (0.9 * lo, 1.1 * hi);
    let n_test = (n / 4).max(1);
    let xt: Vec<f64> = (0..n_test)
        .map(|_| sample_uniform(&mut rng, m1, m2))
        .collect();
    let yt: Vec<f64> = xt
        .iter()
        .map(|&x| f_1d(x) + sample_normal(&mut rng, 0.0, noise_sd))
        .collect();

    ClusteredDataset::new(
        DMatrix::from_fn(n, 1, |i, _| T::of_f64(xs[i])),
        DVector::from_fn(n, |i, _| T::of_f64(ys[i])),
        DMatrix::from_fn(n_c, 1, |i, _| T::of_f64(reps_x[i])),
        n_c,
        b,
        DMatrix::from_fn(n_test, 1, |i, _| T::of_f64(xt[i])),
        DVector::from_fn(n_test, |i, _| T::of_f64(yt[i])),
    )
}

/// 3-D synthetic dataset: representatives on distinct vertices of a cubic
/// lattice with the given side length, clusters sampled uniformly in balls
/// of the given radius, labels from [`f_3d`] plus noise. Test points are
/// uniform within the training bounding box.
pub fn gen_3d<T: Real>(
    n_c: usize,
    b: usize,
    side: f64,
    radius: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<ClusteredDataset<T>> {
    if n_c == 0 || b == 0 {
        return Err(Error::usage("need n_c >= 1 and b >= 1".to_string()));
    }
    if !side.is_finite()
        || side <= 0.0
        || !radius.is_finite()
        || radius <= 0.0
        || !noise_sd.is_finite()
        || noise_sd < 0.0
    {
        return Err(Error::usage(
            "side and radius must be positive, noise_sd non-negative".to_string(),
        ));
    }
    if radius >= side / 2.0 {
        return Err(Error::Overlap(format!(
            "cluster radius {radius} >= half the hypercube side {side}"
        )));
    }

    let mut rng = seeded_rng(seed);
    // Enumerate lattice vertices (i, j, k) * side until n_c are collected.
    let per_axis = (n_c as f64).cbrt().ceil() as usize + 1;
    let mut reps: Vec<[f64; 3]> = Vec::with_capacity(n_c);
    'fill: for i in 0..per_axis {
        for j in 0..per_axis {
            for k in 0..per_axis {
                reps.push([i as f64 * side, j as f64 * side, k as f64 * side]);
                if reps.len() == n_c {
                    break 'fill;
                }
            }
        }
    }

    let n = n_c * b;
    let mut xs: Vec<[f64; 3]> = Vec::with_capacity(n);
    for rep in &reps {
        for _ in 0..b {
            // Uniform in the ball: normalized Gaussian direction, radius by
            // the cube-root transform.
            let dir = [
                sample_normal(&mut rng, 0.0, 1.0),
                sample_normal(&mut rng, 0.0, 1.0),
                sample_normal(&mut rng, 0.0, 1.0),
            ];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            let r = radius * sample_uniform(&mut rng, 0.0, 1.0).cbrt();
            let scale = if norm > 0.0 { r / norm } else { 0.0 };
            xs.push([
                rep[0] + dir[0] * scale,
                rep[1] + dir[1] * scale,
                rep[2] + dir[2] * scale,
            ]);
        }
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| f_3d(x) + sample_normal(&mut rng, 0.0, noise_sd))
        .collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for x in &xs {
        for k in 0..3 {
            lo[k] = lo[k].min(x[k]);
            hi[k] = hi[k].max(x[k]);
        }
    }
    let n_test = (n / 4).max(1);
    let mut xt: Vec<[f64; 3]> = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        xt.push([
            sample_uniform(&mut rng, lo[0], hi[0]),
            sample_uniform(&mut rng, lo[1], hi[1]),
            sample_uniform(&mut rng, lo[2], hi[2]),
        ]);
    }
    let yt: Vec<f64> = xt
        .iter()
        .map(|x| f_3d(x) + sample_normal(&mut rng, 0.0, noise_sd))
        .collect();

    ClusteredDataset::new(
        DMatrix::from_fn(n, 3, |i, j| T::of_f64(xs[i][j])),
        DVector::from_fn(n, |i, _| T::of_f64(ys[i])),
        DMatrix::from_fn(n_c, 3, |i, j| T::of_f64(reps[i][j])),
        n_c,
        b,
        DMatrix::from_fn(n_test, 3, |i, j| T::of_f64(xt[i][j])),
        DVector::from_fn(n_test, |i, _| T::of_f64(yt[i])),
    )
}

/// Clustered inputs without labels: the output of [`kmeans_uniform`].
/// `kept` maps every row of `x` back to its row index in the input matrix,
/// so callers can carry labels through the reordering.
#[derive(Debug, Clone)]
pub struct ClusteredInputs<T> {
    pub x: DMatrix<T>,
    pub reps: DMatrix<T>,
    pub kept: Vec<usize>,
    pub n_c: usize,
    pub b: usize,
}

fn sq_dist<T: Real>(x: &DMatrix<T>, i: usize, c: &[Vec<T>], j: usize) -> T {
    let mut acc = T::zero();
    for k in 0..x.ncols() {
        let d = x[(i, k)] - c[j][k];
        acc += d * d;
    }
    acc
}

/// Lloyd k-means (k-means++ seeding, at most 100 iterations, centroid-shift
/// tolerance 1e-6) followed by trimming every cluster to its `b` members
/// nearest the centroid. Centroids become the representatives.
#[allow(clippy::needless_range_loop)] // index i walks several arrays at once
pub fn kmeans_uniform<T: Real>(
    x: &DMatrix<T>,
    n_c: usize,
    b: usize,
    seed: u64,
) -> Result<ClusteredInputs<T>> {
    let n = x.nrows();
    let d = x.ncols();
    if n_c == 0 || b == 0 || d == 0 {
        return Err(Error::usage("need n_c >= 1, b >= 1, d >= 1".to_string()));
    }
    if n < n_c * b {
        return Err(Error::InfeasibleClusterSize(format!(
            "{n} points cannot fill {n_c} clusters of {b}; reduce b to at most {}",
            n / n_c
        )));
    }

    let mut rng = seeded_rng(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(n_c);
    let first = rng.random_range(0..n);
    centroids.push((0..d).map(|k| x[(first, k)]).collect());
    let mut best_dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(x, i, &centroids, 0).as_f64())
        .collect();
    while centroids.len() < n_c {
        let total: f64 = best_dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = sample_uniform(&mut rng, 0.0, total);
            let mut chosen = n - 1;
            for (i, &w) in best_dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..n)
        };
        centroids.push((0..d).map(|k| x[(pick, k)]).collect());
        let latest = centroids.len() - 1;
        for i in 0..n {
            let dd = sq_dist(x, i, &centroids, latest).as_f64();
            if dd < best_dist[i] {
                best_dist[i] = dd;
            }
        }
    }

    // Lloyd iterations.
    let mut assignment = vec![0usize; n];
    let shift_tol = 1e-6;
    for _ in 0..100 {
        for i in 0..n {
            let mut best = T::of_f64(f64::INFINITY);
            let mut arg = 0;
            for (j, _) in centroids.iter().enumerate() {
                let dd = sq_dist(x, i, &centroids, j);
                if dd < best {
                    best = dd;
                    arg = j;
                }
            }
            assignment[i] = arg;
        }
        let mut sums = vec![vec![T::zero(); d]; n_c];
        let mut counts = vec![0usize; n_c];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for k in 0..d {
                sums[assignment[i]][k] += x[(i, k)];
            }
        }
        let mut max_shift = 0.0f64;
        for j in 0..n_c {
            if counts[j] == 0 {
                // Re-seed an empty cluster on the point farthest from its
                // current centroid.
                let far = (0..n)
                    .max_by(|&a, &bb| {
                        sq_dist(x, a, &centroids, assignment[a])
                            .as_f64()
                            .total_cmp(&sq_dist(x, bb, &centroids, assignment[bb]).as_f64())
                    })
                    .unwrap();
                centroids[j] = (0..d).map(|k| x[(far, k)]).collect();
                max_shift = f64::INFINITY;
                continue;
            }
            let inv = T::of_f64(1.0 / counts[j] as f64);
            let mut shift = 0.0f64;
            for k in 0..d {
                let new = sums[j][k] * inv;
                let delta = (new - centroids[j][k]).as_f64();
                shift += delta * delta;
                centroids[j][k] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < shift_tol {
            break;
        }
    }

    // Final assignment against the converged centroids, then trim each
    // cluster to its b nearest members.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_c];
    for i in 0..n {
        let mut best = T::of_f64(f64::INFINITY);
        let mut arg = 0;
        for j in 0..n_c {
            let dd = sq_dist(x, i, &centroids, j);
            if dd < best {
                best = dd;
                arg = j;
            }
        }
        members[arg].push(i);
    }

    let mut kept = Vec::with_capacity(n_c * b);
    for (j, list) in members.iter().enumerate() {
        if list.len() < b {
            return Err(Error::InfeasibleClusterSize(format!(
                "cluster {j} has only {} members, need b = {b}; try a smaller b",
                list.len()
            )));
        }
        let mut ranked: Vec<(f64, usize)> = list
            .iter()
            .map(|&i| (sq_dist(x, i, &centroids, j).as_f64(), i))
            .collect();
        ranked.sort_by(|a, bb| a.0.total_cmp(&bb.0).then(a.1.cmp(&bb.1)));
        let mut chosen: Vec<usize> = ranked[..b].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        kept.extend(chosen);
    }

    let xk = DMatrix::from_fn(n_c * b, d, |i, k| x[(kept[i], k)]);
    let reps = DMatrix::from_fn(n_c, d, |j, k| centroids[j][k]);
    Ok(ClusteredInputs {
        x: xk,
        reps,
        kept,
        n_c,
        b,
    })
}

/// How the representative of each cluster is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepMode {
    /// The cluster mean.
    Centroid,
    /// The member with the largest summed kernel similarity to the rest of
    /// its cluster.
    Medoid,
}

/// Representative of every cluster of a cluster-contiguous input matrix.
pub fn select_representatives<T: Real>(
    x: &DMatrix<T>,
    n_c: usize,
    b: usize,
    hp: &Hyperparameters<T>,
    mode: RepMode,
) -> Result<DMatrix<T>> {
    let d = x.ncols();
    if x.nrows() != n_c * b || d == 0 {
        return Err(Error::shape(format!(
            "inputs are {}x{}, expected {} rows",
            x.nrows(),
            d,
            n_c * b
        )));
    }
    let mut reps = DMatrix::zeros(n_c, d);
    for j in 0..n_c {
        match mode {
            RepMode::Centroid => {
                let inv = T::of_f64(1.0 / b as f64);
                for k in 0..d {
                    let mut acc = T::zero();
                    for r in 0..b {
                        acc += x[(j * b + r, k)];
                    }
                    reps[(j, k)] = acc * inv;
                }
            }
            RepMode::Medoid => {
                let rows: Vec<Vec<T>> = (0..b)
                    .map(|r| (0..d).map(|k| x[(j * b + r, k)]).collect())
                    .collect();
                let mut best_score = T::of_f64(f64::NEG_INFINITY);
                let mut best = 0;
                for (r, row) in rows.iter().enumerate() {
                    let mut score = T::zero();
                    for other in &rows {
                        score += kernel_eval(row, other, hp)?;
                    }
                    if score > best_score {
                        best_score = score;
                        best = r;
                    }
                }
                for k in 0..d {
                    reps[(j, k)] = rows[best][k];
                }
            }
        }
    }
    Ok(reps)
}
