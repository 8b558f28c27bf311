//! Run manifests and small key-value files (trained hyperparameters,
//! metrics). Everything is line-oriented `key = value` text so runs diff
//! cleanly; floats are printed with Rust's shortest round-trip formatting.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use cluster_gp::kernel::Hyperparameters;
use cluster_gp::real::Real;
use cluster_gp::{Error, Result};

/// Accumulates `key = value` lines and writes them as one file.
pub struct KvFile {
    lines: Vec<String>,
}

impl KvFile {
    pub fn new() -> Self {
        Self { lines: Vec::new() }
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push(format!("{key} = {value}"));
        self
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// The per-run manifest: command, configuration snapshot, inputs, seed,
/// tool version, and the timing summary. Timing lives only here so the
/// numeric outputs of two identical runs stay bit-identical.
pub struct RunManifest {
    kv: KvFile,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize) -> Self {
        let mut kv = KvFile::new();
        kv.push("command", command);
        kv.push("version", env!("CARGO_PKG_VERSION"));
        kv.push("threads", threads);
        Self { kv }
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.kv.push(key, value);
        self
    }

    pub fn finish(mut self, out_dir: &Path, started: std::time::Instant) -> Result<()> {
        self.kv.push("elapsed_ms", started.elapsed().as_millis());
        self.kv.write(&out_dir.join("run_manifest.txt"))
    }
}

const THETA_KEYS: [&str; 3] = ["lengthscale", "noise", "output_scale"];

/// Writes trained hyperparameters as a theta file.
pub fn write_theta<T: Real>(path: &Path, hp: &Hyperparameters<T>) -> Result<()> {
    let mut kv = KvFile::new();
    let values = hp.as_array();
    for (key, value) in THETA_KEYS.iter().zip(values.iter()) {
        kv.push(key, value);
    }
    kv.write(path)
}

/// Reads a theta file written by [`write_theta`].
pub fn read_theta<T: Real>(path: &Path) -> Result<Hyperparameters<T>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Usage(format!("hyperparameter file {file} not found; train first"))
        } else {
            Error::Io(e)
        }
    })?;
    let mut values = [0.0f64; 3];
    let mut seen = [false; 3];
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        if let Some(idx) = THETA_KEYS.iter().position(|key| *key == k.trim()) {
            values[idx] = v
                .trim()
                .parse()
                .map_err(|_| Error::Format {
                    file: file.clone(),
                    msg: format!("bad float for {}", THETA_KEYS[idx]),
                })?;
            seen[idx] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Format {
            file,
            msg: format!("missing key {:?}", THETA_KEYS[missing]),
        });
    }
    Hyperparameters::new(
        T::of_f64(values[0]),
        T::of_f64(values[1]),
        T::of_f64(values[2]),
    )
}
