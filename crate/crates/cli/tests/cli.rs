//! End-to-end tests of the `cgp` binary: exit codes, file contracts, and
//! command composition.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cluster_gp::data::{self, read_npy, write_npy, NpyArray};
use nalgebra::{DMatrix, DVector};

fn cgp() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cgp"));
    cmd.env("RUST_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    cgp().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn generate_synth1d_writes_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let out = run(&[
        "generate",
        "synth1d",
        "--out",
        &path_str(&bundle),
        "--clusters",
        "8",
        "--cluster-size",
        "64",
        "--seed",
        "1",
    ]);
    assert_success(&out);

    let x: NpyArray<f64> = read_npy(&bundle.join("x_train.npy")).unwrap();
    assert_eq!(x.shape, vec![512, 1]);
    let y: NpyArray<f64> = read_npy(&bundle.join("y_train.npy")).unwrap();
    assert_eq!(y.shape, vec![512]);
    let reps: NpyArray<f64> = read_npy(&bundle.join("reps.npy")).unwrap();
    assert_eq!(reps.shape, vec![8, 1]);
    let probes: NpyArray<f64> = read_npy(&bundle.join("probes.npy")).unwrap();
    assert_eq!(probes.shape, vec![512, 8]);
}

#[test]
fn generate_synth3d_overlap_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate",
        "synth3d",
        "--out",
        &path_str(&dir.path().join("bundle")),
        "--side",
        "10",
        "--radius",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

#[test]
fn cluster_external_builds_uniform_bundle() {
    let dir = tempfile::tempdir().unwrap();
    // Four separated blobs of 110 points in 2-D.
    let mut rng = data::seeded_rng(3);
    let centers = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
    let n = 440;
    let mut x = DMatrix::<f64>::zeros(n, 2);
    let mut y = DVector::<f64>::zeros(n);
    for i in 0..n {
        let c = i / 110;
        x[(i, 0)] = centers[c][0] + data::sample_normal(&mut rng, 0.0, 1.0);
        x[(i, 1)] = centers[c][1] + data::sample_normal(&mut rng, 0.0, 1.0);
        y[i] = c as f64;
    }
    let features = dir.path().join("features.npy");
    let labels = dir.path().join("labels.npy");
    write_npy(&features, &NpyArray::from_matrix(&x)).unwrap();
    write_npy(&labels, &NpyArray::from_vector(&y)).unwrap();

    let bundle = dir.path().join("bundle");
    let out = run(&[
        "generate",
        "cluster-external",
        "--out",
        &path_str(&bundle),
        "--features",
        &path_str(&features),
        "--labels",
        &path_str(&labels),
        "--clusters",
        "4",
        "--cluster-size",
        "100",
        "--seed",
        "11",
    ]);
    assert_success(&out);
    let x_train: NpyArray<f64> = read_npy(&bundle.join("x_train.npy")).unwrap();
    assert_eq!(x_train.shape, vec![400, 2]);
    let bundle = data::read_bundle::<f64>(&bundle).unwrap();
    assert_eq!(bundle.data.n_clusters(), 4);
    assert_eq!(bundle.data.cluster_size(), 100);
    assert!(bundle.data.n_test() > 0);
}

fn generate_small(dir: &Path, seed: u64) -> PathBuf {
    let bundle = dir.join(format!("bundle-{seed}"));
    let out = run(&[
        "generate",
        "synth1d",
        "--out",
        &path_str(&bundle),
        "--clusters",
        "4",
        "--cluster-size",
        "8",
        "--seed",
        &seed.to_string(),
    ]);
    assert_success(&out);
    bundle
}

#[test]
fn train_default_epochs_writes_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 21);
    let train_out = dir.path().join("train");
    let out = run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&train_out),
    ]);
    assert_success(&out);
    let report = std::fs::read_to_string(train_out.join("train_report.txt")).unwrap();
    let rows = report.lines().filter(|l| l.starts_with("epoch=")).count();
    assert_eq!(rows, 50);
    assert!(train_out.join("theta.txt").exists());
    assert!(train_out.join("run_manifest.txt").exists());
}

#[test]
fn train_zero_epochs_returns_initial_theta() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 22);
    let train_out = dir.path().join("train");
    let out = run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&train_out),
        "--epochs",
        "0",
    ]);
    assert_success(&out);
    let theta = std::fs::read_to_string(train_out.join("theta.txt")).unwrap();
    assert!(theta.contains("lengthscale = 1"));
    assert!(theta.contains("noise = 1"));
    assert!(theta.contains("output_scale = 1"));
}

#[test]
fn train_with_starved_iteration_budget_fails_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 23);
    let out = run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&dir.path().join("train")),
        "--cg-max-iter",
        "1",
        "--cg-tol",
        "1e-10",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not converge"));
}

#[test]
fn predict_zero_labels_gives_zero_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = data::gen_1d::<f64>(2, 8, 0.2, 0.4, 31).unwrap();
    let zeroed = data::ClusteredDataset::new(
        data.x_train().clone(),
        DVector::zeros(16),
        data.reps().clone(),
        2,
        8,
        data.x_test().clone(),
        data.y_test().clone(),
    )
    .unwrap();
    let probes = cluster_gp::logdet::hutchinson_gen::<f64>(16, 8, 31);
    let manifest = data::Manifest {
        kind: "synth1d".into(),
        precision: "f64".into(),
        d: 1,
        n_c: 2,
        b: 8,
        n_train: 16,
        n_test: zeroed.n_test(),
        probe_count: 8,
        seed: 31,
        init_lengthscale: 1.0,
        init_noise: 1.0,
        init_output_scale: 1.0,
    };
    let bundle = dir.path().join("bundle");
    data::write_bundle(&bundle, &zeroed, &probes, &manifest).unwrap();
    let theta = dir.path().join("theta.txt");
    std::fs::write(&theta, "lengthscale = 1\nnoise = 0.5\noutput_scale = 1\n").unwrap();

    let pred_out = dir.path().join("pred");
    let out = run(&[
        "predict",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&theta),
        "--out",
        &path_str(&pred_out),
    ]);
    assert_success(&out);
    let mean: NpyArray<f64> = read_npy(&pred_out.join("mean.npy")).unwrap();
    assert!(mean.data.iter().all(|&v| v == 0.0));
}

#[test]
fn evaluate_is_predict_plus_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 24);
    let train_out = dir.path().join("train");
    assert_success(&run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&train_out),
        "--epochs",
        "5",
    ]));
    let theta = train_out.join("theta.txt");

    let pred_out = dir.path().join("pred");
    let eval_out = dir.path().join("eval");
    assert_success(&run(&[
        "predict",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&theta),
        "--out",
        &path_str(&pred_out),
    ]));
    assert_success(&run(&[
        "evaluate",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&theta),
        "--out",
        &path_str(&eval_out),
    ]));

    for file in ["mean.npy", "variance.npy", "lower.npy", "upper.npy"] {
        let a = std::fs::read(pred_out.join(file)).unwrap();
        let b = std::fs::read(eval_out.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between predict and evaluate");
    }
    let pred_metrics = std::fs::read_to_string(pred_out.join("metrics.txt")).unwrap();
    let eval_metrics = std::fs::read_to_string(eval_out.join("metrics.txt")).unwrap();
    assert!(!pred_metrics.contains("rmse"));
    let rmse_line = eval_metrics
        .lines()
        .find(|l| l.starts_with("rmse ="))
        .expect("evaluate metrics carry an rmse");
    let rmse: f64 = rmse_line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!(rmse >= 0.0);
    // Every non-rmse line agrees.
    for line in pred_metrics.lines() {
        assert!(eval_metrics.contains(line), "metrics line {line:?} missing");
    }
}

#[test]
fn compare_oracle_desk_scale_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    assert_success(&run(&[
        "generate",
        "synth1d",
        "--out",
        &path_str(&bundle),
        "--clusters",
        "8",
        "--cluster-size",
        "64",
        "--radius",
        "0.15",
        "--seed",
        "40",
    ]));
    let train_out = dir.path().join("train");
    assert_success(&run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&train_out),
        "--epochs",
        "10",
    ]));
    let compare_out = dir.path().join("compare");
    assert_success(&run(&[
        "compare-oracle",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&train_out.join("theta.txt")),
        "--out",
        &path_str(&compare_out),
    ]));
    let text = std::fs::read_to_string(compare_out.join("comparison.txt")).unwrap();
    let field = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key} in comparison"))
            .split('=')
            .nth(1)
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    assert!(field("loss_rel_delta") <= 0.01, "loss delta: {text}");
    assert!(field("logdet_rel_delta") <= 0.05, "logdet delta: {text}");
    assert!(
        field("pcg_iterations_y_solve_tol1e-8") <= 9.0,
        "tight solve exceeded n_c + 1: {text}"
    );
}

#[test]
fn corrupted_bundle_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 26);
    let y_path = bundle.join("y_train.npy");
    let mut bytes = std::fs::read(&y_path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&y_path, bytes).unwrap();
    let out = run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&dir.path().join("train")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_precision_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    assert_success(&run(&[
        "generate",
        "synth1d",
        "--out",
        &path_str(&bundle),
        "--clusters",
        "4",
        "--cluster-size",
        "8",
        "--seed",
        "27",
        "--precision",
        "f32",
    ]));
    // Stored arrays really are 4-byte floats.
    let x: NpyArray<f32> = read_npy(&bundle.join("x_train.npy")).unwrap();
    assert_eq!(x.shape, vec![32, 1]);
    let raw = std::fs::read(bundle.join("y_train.npy")).unwrap();
    assert!(String::from_utf8_lossy(&raw[..80]).contains("<f4"));

    let train_out = dir.path().join("train");
    assert_success(&run(&[
        "train",
        "--bundle",
        &path_str(&bundle),
        "--out",
        &path_str(&train_out),
        "--epochs",
        "3",
        "--precision",
        "f32",
    ]));
    let eval_out = dir.path().join("eval");
    assert_success(&run(&[
        "evaluate",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&train_out.join("theta.txt")),
        "--out",
        &path_str(&eval_out),
        "--precision",
        "f32",
    ]));
    let metrics = std::fs::read_to_string(eval_out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("rmse ="));
}

#[test]
fn compare_oracle_guards_large_problems() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    assert_success(&run(&[
        "generate",
        "synth1d",
        "--out",
        &path_str(&bundle),
        "--clusters",
        "8",
        "--cluster-size",
        "520",
        "--seed",
        "9",
    ]));
    let theta = dir.path().join("theta.txt");
    std::fs::write(&theta, "lengthscale = 1\nnoise = 1\noutput_scale = 1\n").unwrap();
    let out = run(&[
        "compare-oracle",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&theta),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle guard"));
}

#[test]
fn missing_theta_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_small(dir.path(), 25);
    let out = run(&[
        "predict",
        "--bundle",
        &path_str(&bundle),
        "--theta",
        &path_str(&dir.path().join("nope.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
