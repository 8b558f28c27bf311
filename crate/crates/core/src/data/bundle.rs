//! Dataset bundles: the on-disk unit consumed by training and inference.
//!
//! A bundle directory holds six arrays (`x_train`, `y_train`, `x_test`,
//! `y_test`, `reps`, `probes`) plus a line-oriented `manifest.txt` recording
//! the structure, seeds, and initial hyperparameters.

use std::fs;
use std::path::Path;

use crate::data::npy::{read_npy, write_npy, NpyArray};
use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::logdet::HutchinsonProbes;
use crate::real::Real;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Bundle metadata. Everything needed to re-derive or validate the arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub precision: String,
    pub d: usize,
    pub n_c: usize,
    pub b: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub probe_count: usize,
    pub seed: u64,
    pub init_lengthscale: f64,
    pub init_noise: f64,
    pub init_output_scale: f64,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("kind = {}\n", self.kind));
        s.push_str(&format!("precision = {}\n", self.precision));
        s.push_str(&format!("d = {}\n", self.d));
        s.push_str(&format!("n_c = {}\n", self.n_c));
        s.push_str(&format!("b = {}\n", self.b));
        s.push_str(&format!("n_train = {}\n", self.n_train));
        s.push_str(&format!("n_test = {}\n", self.n_test));
        s.push_str(&format!("probe_count = {}\n", self.probe_count));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("init_lengthscale = {}\n", self.init_lengthscale));
        s.push_str(&format!("init_noise = {}\n", self.init_noise));
        s.push_str(&format!("init_output_scale = {}\n", self.init_output_scale));
        s
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                if let Some((k, v)) = line.split_once('=') {
                    if k.trim() == key {
                        return Ok(v.trim().to_string());
                    }
                }
            }
            Err(Error::format(file, format!("manifest is missing key {key:?}")))
        };
        let parse_usize = |key: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::format(file, format!("bad integer for {key}: {v:?}")))
        };
        let parse_f64 = |key: &str, v: String| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::format(file, format!("bad float for {key}: {v:?}")))
        };

        let kind = get("kind")?;
        let precision = get("precision")?;
        let d = parse_usize("d", get("d")?)?;
        let n_c = parse_usize("n_c", get("n_c")?)?;
        let b = parse_usize("b", get("b")?)?;
        let n_train = parse_usize("n_train", get("n_train")?)?;
        let n_test = parse_usize("n_test", get("n_test")?)?;
        let probe_count = parse_usize("probe_count", get("probe_count")?)?;
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::format(file, "bad integer for seed"))?;
        let init_lengthscale = parse_f64("init_lengthscale", get("init_lengthscale")?)?;
        let init_noise = parse_f64("init_noise", get("init_noise")?)?;
        let init_output_scale = parse_f64("init_output_scale", get("init_output_scale")?)?;
        Ok(Self {
            kind,
            precision,
            d,
            n_c,
            b,
            n_train,
            n_test,
            probe_count,
            seed,
            init_lengthscale,
            init_noise,
            init_output_scale,
        })
    }
}

/// A fully loaded bundle.
#[derive(Debug, Clone)]
pub struct Bundle<T> {
    pub data: ClusteredDataset<T>,
    pub probes: HutchinsonProbes<T>,
    pub manifest: Manifest,
}

/// Writes all arrays and the manifest into `dir` (created if missing).
pub fn write_bundle<T: Real>(
    dir: &Path,
    data: &ClusteredDataset<T>,
    probes: &HutchinsonProbes<T>,
    manifest: &Manifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_npy(&dir.join("x_train.npy"), &NpyArray::from_matrix(data.x_train()))?;
    write_npy(&dir.join("y_train.npy"), &NpyArray::from_vector(data.y_train()))?;
    write_npy(&dir.join("x_test.npy"), &NpyArray::from_matrix(data.x_test()))?;
    write_npy(&dir.join("y_test.npy"), &NpyArray::from_vector(data.y_test()))?;
    write_npy(&dir.join("reps.npy"), &NpyArray::from_matrix(data.reps()))?;
    write_npy(&dir.join("probes.npy"), &NpyArray::from_matrix(probes.matrix()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(())
}

fn matrix_for<T: Real>(arr: &NpyArray<T>, file: &str) -> Result<nalgebra::DMatrix<T>> {
    arr.to_matrix()
        .ok_or_else(|| Error::format(file, format!("expected 1-D or 2-D array, got shape {:?}", arr.shape)))
}

fn vector_for<T: Real>(arr: &NpyArray<T>, file: &str) -> Result<nalgebra::DVector<T>> {
    arr.to_vector()
        .ok_or_else(|| Error::format(file, format!("expected 1-D array, got shape {:?}", arr.shape)))
}

/// Loads and validates a bundle. Shapes must agree with the manifest and the
/// cluster structure (`n_train = n_c·b`); anything else is a format error
/// naming the offending file.
pub fn read_bundle<T: Real>(dir: &Path) -> Result<Bundle<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest = Manifest::parse(&text, &manifest_path.display().to_string())?;

    if manifest.n_train != manifest.n_c * manifest.b {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!(
                "n_train = {} but n_c * b = {}",
                manifest.n_train,
                manifest.n_c * manifest.b
            ),
        ));
    }

    let x_train_path = dir.join("x_train.npy");
    let x_train = matrix_for(&read_npy::<T>(&x_train_path)?, &x_train_path.display().to_string())?;
    if x_train.nrows() != manifest.n_train || x_train.ncols() != manifest.d {
        return Err(Error::format(
            x_train_path.display().to_string(),
            format!(
                "shape {}x{} does not match manifest ({} rows of dimension {})",
                x_train.nrows(),
                x_train.ncols(),
                manifest.n_train,
                manifest.d
            ),
        ));
    }

    let y_train_path = dir.join("y_train.npy");
    let y_train = vector_for(&read_npy::<T>(&y_train_path)?, &y_train_path.display().to_string())?;

    let x_test_path = dir.join("x_test.npy");
    let x_test = matrix_for(&read_npy::<T>(&x_test_path)?, &x_test_path.display().to_string())?;
    if x_test.nrows() != manifest.n_test {
        return Err(Error::format(
            x_test_path.display().to_string(),
            format!("{} rows, manifest says {}", x_test.nrows(), manifest.n_test),
        ));
    }

    let y_test_path = dir.join("y_test.npy");
    let y_test = vector_for(&read_npy::<T>(&y_test_path)?, &y_test_path.display().to_string())?;

    let reps_path = dir.join("reps.npy");
    let reps = matrix_for(&read_npy::<T>(&reps_path)?, &reps_path.display().to_string())?;

    let probes_path = dir.join("probes.npy");
    let probes_mat = matrix_for(&read_npy::<T>(&probes_path)?, &probes_path.display().to_string())?;
    if probes_mat.nrows() != manifest.n_train || probes_mat.ncols() != manifest.probe_count {
        return Err(Error::format(
            probes_path.display().to_string(),
            format!(
                "shape {}x{} does not match manifest ({}x{})",
                probes_mat.nrows(),
                probes_mat.ncols(),
                manifest.n_train,
                manifest.probe_count
            ),
        ));
    }
    let probes = HutchinsonProbes::from_matrix(probes_mat, manifest.seed).map_err(|e| {
        Error::format(probes_path.display().to_string(), format!("invalid probes: {e}"))
    })?;

    let data = ClusteredDataset::new(
        x_train,
        y_train,
        reps,
        manifest.n_c,
        manifest.b,
        x_test,
        y_test,
    )
    .map_err(|e| Error::format(dir.display().to_string(), format!("inconsistent bundle: {e}")))?;

    Ok(Bundle {
        data,
        probes,
        manifest,
    })
}
