//! Implementations of the `cgp` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use cluster_gp::data::{
    self, read_bundle, write_bundle, write_npy, Bundle, ClusteredDataset, Manifest, NpyArray,
    RepMode,
};
use cluster_gp::kernel::{build_structured, covar_dense, Hyperparameters};
use cluster_gp::logdet::hutchinson_gen;
use cluster_gp::oracle;
use cluster_gp::pcg::{batch_cg, CgConfig};
use cluster_gp::predict::{posterior, rmse, PredictConfig, Posterior};
use cluster_gp::real::Real;
use cluster_gp::structured::{factorize_blocks, JitterPolicy, PreconditionedOperator, ShortcutKind};
use cluster_gp::train::{compute_loss, train as train_loop, StepSizes, TrainConfig, TrainReport};
use cluster_gp::{Error, Result};

use crate::runfile::{read_theta, write_theta, KvFile, RunManifest};
use crate::{CommonArgs, Precision};

// ---------------------------------------------------------------------------
// generate

#[derive(Args)]
pub struct GenerateArgs {
    #[command(subcommand)]
    kind: GenerateKind,
}

#[derive(Args)]
struct GenerateCommon {
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,

    /// Number of clusters.
    #[arg(long, default_value_t = 8)]
    clusters: usize,

    /// Uniform cluster size.
    #[arg(long, default_value_t = 64)]
    cluster_size: usize,

    /// Hutchinson probe count stored with the bundle.
    #[arg(long, default_value_t = 8)]
    probes: usize,

    /// Generation seed (also seeds the probes).
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Precision of the stored arrays.
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,

    /// Initial hyperparameters recorded in the manifest.
    #[arg(long, default_value_t = 1.0)]
    init_lengthscale: f64,
    #[arg(long, default_value_t = 1.0)]
    init_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    init_output_scale: f64,
}

#[derive(Subcommand)]
enum GenerateKind {
    /// 1-D synthetic dataset around equally spaced representatives.
    Synth1d {
        #[command(flatten)]
        common: GenerateCommon,
        /// Cluster radius (representative spacing is 1.0).
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
        /// Standard deviation of the label noise.
        #[arg(long, default_value_t = 0.4)]
        noise_sd: f64,
    },
    /// 3-D synthetic dataset around hypercube vertices.
    Synth3d {
        #[command(flatten)]
        common: GenerateCommon,
        /// Hypercube side length.
        #[arg(long, default_value_t = 10.0)]
        side: f64,
        /// Cluster ball radius (must stay below side/2).
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.4)]
        noise_sd: f64,
    },
    /// Cluster an external feature matrix with k-means and trim to uniform
    /// cluster sizes.
    ClusterExternal {
        #[command(flatten)]
        common: GenerateCommon,
        /// Feature matrix (.npy, one row per sample).
        #[arg(long)]
        features: PathBuf,
        /// Labels (.npy, one per sample).
        #[arg(long)]
        labels: PathBuf,
        /// Representative selection rule.
        #[arg(long, value_enum, default_value = "centroid")]
        rep_mode: RepModeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RepModeArg {
    Centroid,
    Medoid,
}

pub fn generate(args: GenerateArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    match args.kind {
        GenerateKind::Synth1d {
            common,
            radius,
            noise_sd,
        } => match common.precision {
            Precision::F64 => gen_synth::<f64>(&common, "synth1d", threads, started, |c| {
                data::gen_1d(c.clusters, c.cluster_size, radius, noise_sd, c.seed)
            }),
            Precision::F32 => gen_synth::<f32>(&common, "synth1d", threads, started, |c| {
                data::gen_1d(c.clusters, c.cluster_size, radius, noise_sd, c.seed)
            }),
        },
        GenerateKind::Synth3d {
            common,
            side,
            radius,
            noise_sd,
        } => match common.precision {
            Precision::F64 => gen_synth::<f64>(&common, "synth3d", threads, started, |c| {
                data::gen_3d(c.clusters, c.cluster_size, side, radius, noise_sd, c.seed)
            }),
            Precision::F32 => gen_synth::<f32>(&common, "synth3d", threads, started, |c| {
                data::gen_3d(c.clusters, c.cluster_size, side, radius, noise_sd, c.seed)
            }),
        },
        GenerateKind::ClusterExternal {
            common,
            features,
            labels,
            rep_mode,
        } => match common.precision {
            Precision::F64 => gen_external::<f64>(&common, &features, &labels, rep_mode, threads, started),
            Precision::F32 => gen_external::<f32>(&common, &features, &labels, rep_mode, threads, started),
        },
    }
}

fn manifest_for<T: Real>(
    common: &GenerateCommon,
    kind: &str,
    data: &ClusteredDataset<T>,
) -> Manifest {
    Manifest {
        kind: kind.to_string(),
        precision: common.precision.name().to_string(),
        d: data.d(),
        n_c: data.n_clusters(),
        b: data.cluster_size(),
        n_train: data.n(),
        n_test: data.n_test(),
        probe_count: common.probes,
        seed: common.seed,
        init_lengthscale: common.init_lengthscale,
        init_noise: common.init_noise,
        init_output_scale: common.init_output_scale,
    }
}

fn gen_synth<T: Real>(
    common: &GenerateCommon,
    kind: &str,
    threads: usize,
    started: Instant,
    make: impl FnOnce(&GenerateCommon) -> Result<ClusteredDataset<T>>,
) -> Result<()> {
    if common.probes == 0 {
        return Err(Error::Usage("need at least one probe vector".to_string()));
    }
    let data = make(common)?;
    let probes = hutchinson_gen::<T>(data.n(), common.probes, common.seed);
    let manifest = manifest_for(common, kind, &data);
    write_bundle(&common.out, &data, &probes, &manifest)?;

    let mut run = RunManifest::new("generate", threads);
    run.push("kind", kind)
        .push("out", common.out.display())
        .push("precision", common.precision.name())
        .push("n_c", data.n_clusters())
        .push("b", data.cluster_size())
        .push("n_train", data.n())
        .push("n_test", data.n_test())
        .push("probe_count", common.probes)
        .push("seed", common.seed);
    run.finish(&common.out, started)?;
    log::info!(
        "wrote {} bundle with {} training rows to {}",
        kind,
        data.n(),
        common.out.display()
    );
    Ok(())
}

fn gen_external<T: Real>(
    common: &GenerateCommon,
    features: &Path,
    labels: &Path,
    rep_mode: RepModeArg,
    threads: usize,
    started: Instant,
) -> Result<()> {
    if common.probes == 0 {
        return Err(Error::Usage("need at least one probe vector".to_string()));
    }
    let x_arr: NpyArray<T> = data::read_npy(features)?;
    let x = x_arr.to_matrix().ok_or_else(|| Error::Format {
        file: features.display().to_string(),
        msg: format!("expected a 1-D or 2-D array, got shape {:?}", x_arr.shape),
    })?;
    let y_arr: NpyArray<T> = data::read_npy(labels)?;
    let y = y_arr.to_vector().ok_or_else(|| Error::Format {
        file: labels.display().to_string(),
        msg: format!("expected a 1-D array, got shape {:?}", y_arr.shape),
    })?;
    if y.len() != x.nrows() {
        return Err(Error::Format {
            file: labels.display().to_string(),
            msg: format!("{} labels for {} feature rows", y.len(), x.nrows()),
        });
    }

    let clustered = data::kmeans_uniform(&x, common.clusters, common.cluster_size, common.seed)?;
    let init_hp = Hyperparameters::new(
        T::of_f64(common.init_lengthscale),
        T::of_f64(common.init_noise),
        T::of_f64(common.init_output_scale),
    )?;
    let reps = match rep_mode {
        RepModeArg::Centroid => clustered.reps.clone(),
        RepModeArg::Medoid => data::select_representatives(
            &clustered.x,
            clustered.n_c,
            clustered.b,
            &init_hp,
            RepMode::Medoid,
        )?,
    };
    let y_train = DVector::from_fn(clustered.kept.len(), |i, _| y[clustered.kept[i]]);

    // Held-out points: whatever the trim dropped, sampled to a 80/20 split.
    let n_train = clustered.kept.len();
    let mut dropped: Vec<usize> = {
        let kept: std::collections::HashSet<usize> = clustered.kept.iter().copied().collect();
        (0..x.nrows()).filter(|i| !kept.contains(i)).collect()
    };
    let mut rng = data::seeded_rng(common.seed ^ 0x7e57);
    data::shuffle(&mut rng, &mut dropped);
    let n_test = dropped.len().min(n_train / 4);
    let test_idx = &dropped[..n_test];
    let x_test = DMatrix::from_fn(n_test, x.ncols(), |i, j| x[(test_idx[i], j)]);
    let y_test = DVector::from_fn(n_test, |i, _| y[test_idx[i]]);
    if n_test == 0 {
        log::warn!("no dropped points left over for a test set; bundle has n_test = 0");
    }

    let dataset = ClusteredDataset::new(
        clustered.x,
        y_train,
        reps,
        clustered.n_c,
        clustered.b,
        x_test,
        y_test,
    )?;
    let probes = hutchinson_gen::<T>(dataset.n(), common.probes, common.seed);
    let manifest = manifest_for(common, "cluster-external", &dataset);
    write_bundle(&common.out, &dataset, &probes, &manifest)?;

    let mut run = RunManifest::new("generate", threads);
    run.push("kind", "cluster-external")
        .push("features", features.display())
        .push("labels", labels.display())
        .push("out", common.out.display())
        .push("precision", common.precision.name())
        .push("n_c", dataset.n_clusters())
        .push("b", dataset.cluster_size())
        .push("n_train", dataset.n())
        .push("n_test", dataset.n_test())
        .push("seed", common.seed);
    run.finish(&common.out, started)?;
    log::info!(
        "clustered {} rows into {} x {} (kept {}, test {})",
        x.nrows(),
        dataset.n_clusters(),
        dataset.cluster_size(),
        dataset.n(),
        dataset.n_test()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Training epochs.
    #[arg(long, default_value_t = 50)]
    epochs: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,

    /// Stop halving a gradient step once consecutive estimates differ by
    /// less than this.
    #[arg(long, default_value_t = 1e-3)]
    grad_threshold: f64,

    /// Cap on halvings per gradient estimate.
    #[arg(long, default_value_t = 20)]
    max_halvings: usize,

    /// Initial forward-difference step as a fraction of each parameter.
    #[arg(long, default_value_t = 0.1)]
    step_fraction: f64,

    /// Seed recorded in the run manifest (defaults to the bundle seed).
    #[arg(long)]
    seed: Option<u64>,

    /// Override the bundle's initial hyperparameters.
    #[arg(long)]
    init_lengthscale: Option<f64>,
    #[arg(long)]
    init_noise: Option<f64>,
    #[arg(long)]
    init_output_scale: Option<f64>,
}

pub fn train(args: TrainArgs, threads: usize) -> Result<()> {
    match args.common.precision {
        Precision::F64 => run_train::<f64>(args, threads),
        Precision::F32 => run_train::<f32>(args, threads),
    }
}

fn initial_hp<T: Real>(manifest: &Manifest, args: &TrainArgs) -> Result<Hyperparameters<T>> {
    Hyperparameters::new(
        T::of_f64(args.init_lengthscale.unwrap_or(manifest.init_lengthscale)),
        T::of_f64(args.init_noise.unwrap_or(manifest.init_noise)),
        T::of_f64(args.init_output_scale.unwrap_or(manifest.init_output_scale)),
    )
}

fn write_train_report<T: Real>(path: &Path, report: &TrainReport<T>) -> Result<()> {
    let mut lines = Vec::with_capacity(report.epochs.len() + 1);
    lines.push(
        "# per-epoch record: loss and gradients at the epoch's operating point".to_string(),
    );
    for e in &report.epochs {
        lines.push(format!(
            "epoch={} loss={} grad_lengthscale={} grad_noise={} grad_output_scale={} \
             lengthscale={} noise={} output_scale={} pcg_max={} pcg_mean={} \
             halvings_lengthscale={} halvings_noise={} halvings_output_scale={}",
            e.epoch,
            e.loss,
            e.gradients[0],
            e.gradients[1],
            e.gradients[2],
            e.hyperparameters[0],
            e.hyperparameters[1],
            e.hyperparameters[2],
            e.pcg_max,
            e.pcg_mean,
            e.halvings[0],
            e.halvings[1],
            e.halvings[2],
        ));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run_train<T: Real>(args: TrainArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| args.common.bundle.join("train"));
    std::fs::create_dir_all(&out)?;

    let bundle: Bundle<T> = read_bundle(&args.common.bundle)?;
    let hp0 = initial_hp::<T>(&bundle.manifest, &args)?;
    let seed = args.seed.unwrap_or(bundle.manifest.seed);
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: T::of_f64(args.lr),
        grad_threshold: T::of_f64(args.grad_threshold),
        initial_steps: StepSizes::RelativeToCurrent(T::of_f64(args.step_fraction)),
        cg: CgConfig {
            tol: T::of_f64(args.common.cg_tol),
            max_iter: args.common.cg_max_iter,
        },
        max_halvings: args.max_halvings,
        jitter: JitterPolicy::default(),
        seed,
    };

    let (hp, report) = train_loop(&bundle.data, hp0, &cfg, &bundle.probes)?;

    write_train_report(&out.join("train_report.txt"), &report)?;
    write_theta(&out.join("theta.txt"), &hp)?;

    let mut run = RunManifest::new("train", threads);
    run.push("bundle", args.common.bundle.display())
        .push("out", out.display())
        .push("precision", args.common.precision.name())
        .push("seed", seed)
        .push("epochs", args.epochs)
        .push("learning_rate", args.lr)
        .push("cg_tol", args.common.cg_tol)
        .push("cg_max_iter", args.common.cg_max_iter)
        .push("grad_threshold", args.grad_threshold)
        .push("max_halvings", args.max_halvings)
        .push("step_fraction", args.step_fraction)
        .push("factorizations", report.factorizations)
        .push("pcg_mean", report.mean_pcg_iterations())
        .push("pcg_max", report.max_pcg_iterations());
    run.finish(&out, started)?;

    if let Some(loss) = report.final_loss() {
        log::info!(
            "trained {} epochs, final loss {}, mean PCG iterations {:.2}",
            report.epochs.len(),
            loss,
            report.mean_pcg_iterations()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict / evaluate

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Trained hyperparameters (theta file from `cgp train`).
    #[arg(long)]
    theta: PathBuf,

    /// Test points per batched variance solve.
    #[arg(long, default_value_t = 256)]
    chunk: usize,
}

fn write_posterior_files<T: Real>(out: &Path, post: &Posterior<T>) -> Result<()> {
    write_npy(&out.join("mean.npy"), &NpyArray::from_vector(&post.mean))?;
    write_npy(&out.join("variance.npy"), &NpyArray::from_vector(&post.variance))?;
    write_npy(&out.join("lower.npy"), &NpyArray::from_vector(&post.lower))?;
    write_npy(&out.join("upper.npy"), &NpyArray::from_vector(&post.upper))?;
    Ok(())
}

pub fn predict(args: PredictArgs, threads: usize, with_rmse: bool) -> Result<()> {
    match args.common.precision {
        Precision::F64 => run_predict::<f64>(args, threads, with_rmse),
        Precision::F32 => run_predict::<f32>(args, threads, with_rmse),
    }
}

fn run_predict<T: Real>(args: PredictArgs, threads: usize, with_rmse: bool) -> Result<()> {
    let started = Instant::now();
    let command = if with_rmse { "evaluate" } else { "predict" };
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| args.common.bundle.join(command));
    std::fs::create_dir_all(&out)?;

    let bundle: Bundle<T> = read_bundle(&args.common.bundle)?;
    let hp = read_theta::<T>(&args.theta)?;
    let cfg = PredictConfig {
        cg: CgConfig {
            tol: T::of_f64(args.common.cg_tol),
            max_iter: args.common.cg_max_iter,
        },
        chunk: args.chunk,
        jitter: JitterPolicy::default(),
    };

    let (post, stats) = posterior(&bundle.data, bundle.data.x_test(), &hp, &cfg)?;
    write_posterior_files(&out, &post)?;

    let mut metrics = KvFile::new();
    if with_rmse {
        let score = rmse(&post.mean, bundle.data.y_test())?;
        metrics.push("rmse", score);
    }
    metrics.push("n_test", post.len());
    metrics.push("clamped_variances", post.clamped_variances);
    metrics.push("pcg_mean_iterations", stats.mean_iterations());
    metrics.push("pcg_max_iterations", stats.max_iterations());
    metrics.write(&out.join("metrics.txt"))?;

    let mut run = RunManifest::new(command, threads);
    run.push("bundle", args.common.bundle.display())
        .push("theta", args.theta.display())
        .push("out", out.display())
        .push("precision", args.common.precision.name())
        .push("cg_tol", args.common.cg_tol)
        .push("cg_max_iter", args.common.cg_max_iter)
        .push("chunk", args.chunk);
    run.finish(&out, started)?;
    log::info!("wrote posterior for {} test points to {}", post.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare-oracle

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Trained hyperparameters (theta file from `cgp train`).
    #[arg(long)]
    theta: PathBuf,
}

pub fn compare_oracle(args: CompareArgs, threads: usize) -> Result<()> {
    match args.common.precision {
        Precision::F64 => run_compare::<f64>(args, threads),
        Precision::F32 => run_compare::<f32>(args, threads),
    }
}

fn run_compare<T: Real>(args: CompareArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| args.common.bundle.join("compare"));

    let bundle: Bundle<T> = read_bundle(&args.common.bundle)?;
    let data = &bundle.data;
    if data.n() > oracle::DENSE_LIMIT {
        return Err(Error::OracleGuard {
            n: data.n(),
            limit: oracle::DENSE_LIMIT,
        });
    }
    std::fs::create_dir_all(&out)?;
    let hp = read_theta::<T>(&args.theta)?;
    let cg = CgConfig {
        tol: T::of_f64(args.common.cg_tol),
        max_iter: args.common.cg_max_iter,
    };

    let sk = build_structured(data, &hp)?;
    let bc = factorize_blocks(&sk, &JitterPolicy::default())?;
    let breakdown = compute_loss(
        &bc,
        &sk,
        data,
        &hp,
        &ShortcutKind::Baseline,
        &bundle.probes,
        &cg,
    )?;

    // Exact values on the densified structured covariance.
    let dense = oracle::densify(&sk);
    let model = oracle::DenseModel::new(dense.clone())?;
    let loss_oracle = model.loss(data.y_train());
    let logdet_oracle = model.logdet();

    // Convergence of the split-preconditioned solve at a tight tolerance.
    let op = PreconditionedOperator::new(&bc, &sk, ShortcutKind::Baseline)?;
    let y = DMatrix::from_column_slice(data.n(), 1, data.y_train().as_slice());
    let rhs = bc.apply_inv_rt(&y);
    let (_, tight) = batch_cg(&op, &rhs, &CgConfig { tol: T::of_f64(1e-8), max_iter: 2000 });

    // Posterior comparison on the test points.
    let (post, stats) = posterior(data, data.x_test(), &hp, &PredictConfig {
        cg,
        chunk: 256,
        jitter: JitterPolicy::default(),
    })?;
    let k_star = covar_dense(data.x_train(), data.x_test(), &hp, false)?;
    let k_ss = DVector::from_element(data.n_test(), hp.output_scale);
    let exact_post = oracle::exact_posterior(&dense, &k_star, &k_ss, data.y_train())?;
    let mut mean_delta = T::zero();
    let mut var_delta = T::zero();
    for j in 0..data.n_test() {
        mean_delta = mean_delta.max((post.mean[j] - exact_post.mean[j]).abs());
        var_delta = var_delta.max((post.variance[j] - exact_post.variance[j]).abs());
    }

    let rel = |a: T, b: T| ((a - b) / b).abs();
    let mut kv = KvFile::new();
    kv.push("n", data.n())
        .push("n_c", data.n_clusters())
        .push("b", data.cluster_size())
        .push("loss_structured", breakdown.loss)
        .push("loss_oracle", loss_oracle)
        .push("loss_rel_delta", rel(breakdown.loss, loss_oracle))
        .push("logdet_structured", breakdown.logdet)
        .push("logdet_oracle", logdet_oracle)
        .push("logdet_rel_delta", rel(breakdown.logdet, logdet_oracle))
        .push("posterior_mean_max_delta", mean_delta)
        .push("posterior_variance_max_delta", var_delta)
        .push("pcg_iterations_y_solve_tol1e-8", tight.iterations)
        .push("pcg_tight_converged", tight.converged)
        .push("pcg_loss_iterations_y", breakdown.solve_iterations[0])
        .push("pcg_loss_iterations_logdet", breakdown.solve_iterations[1])
        .push("pcg_posterior_mean_iterations", stats.mean_iterations())
        .push("pcg_posterior_max_iterations", stats.max_iterations());
    kv.write(&out.join("comparison.txt"))?;

    let mut run = RunManifest::new("compare-oracle", threads);
    run.push("bundle", args.common.bundle.display())
        .push("theta", args.theta.display())
        .push("out", out.display())
        .push("precision", args.common.precision.name())
        .push("cg_tol", args.common.cg_tol)
        .push("cg_max_iter", args.common.cg_max_iter);
    run.finish(&out, started)?;
    log::info!(
        "loss delta {:.3e}, logdet delta {:.3e}, tight solve took {} iterations",
        rel(breakdown.loss, loss_oracle).as_f64(),
        rel(breakdown.logdet, logdet_oracle).as_f64(),
        tight.iterations
    );
    Ok(())
}
