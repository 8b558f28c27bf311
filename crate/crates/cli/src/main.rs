//! `cgp` — train and evaluate cluster-structured Gaussian process models.
//!
//! Subcommands: `generate` (synthetic or externally clustered bundles),
//! `train`, `predict`, `evaluate`, and `compare-oracle`. Every run writes a
//! `run_manifest.txt` snapshot of its inputs; numeric outputs are
//! reproducible bit-for-bit for a fixed seed and thread count.

mod commands;
mod runfile;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cluster_gp::Error;

/// Environment variable consulted for the default worker thread count.
pub const THREADS_ENV: &str = "CGP_THREADS";

#[derive(Parser)]
#[command(name = "cgp", version, about = "Gaussian process regression on clustered data")]
struct Cli {
    /// Worker threads for block-parallel linear algebra. Defaults to
    /// $CGP_THREADS or 1; results are bit-identical across thread counts.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Create a dataset bundle (arrays, probes, manifest) on disk.
    Generate(commands::GenerateArgs),
    /// Optimize hyperparameters on a bundle; writes a report and theta file.
    Train(commands::TrainArgs),
    /// Posterior mean/variance/bounds for the bundle's test points.
    Predict(commands::PredictArgs),
    /// Predict plus RMSE against the bundle's test labels.
    Evaluate(commands::PredictArgs),
    /// Validate the structured pipeline against the exact dense oracle.
    CompareOracle(commands::CompareArgs),
}

/// Flags shared by every command that reads a bundle.
#[derive(Args)]
pub struct CommonArgs {
    /// Bundle directory.
    #[arg(long)]
    pub bundle: std::path::PathBuf,

    /// Output directory (defaults to a subdirectory of the bundle).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,

    /// Compute precision.
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,

    /// Per-column absolute residual tolerance for CG.
    #[arg(long, default_value_t = 0.01)]
    pub cg_tol: f64,

    /// CG iteration budget; exceeding it is a hard error.
    #[arg(long, default_value_t = 2000)]
    pub cg_max_iter: usize,
}

fn exit_code(err: &Error) -> i32 {
    fn classify(err: &Error) -> i32 {
        match err {
            Error::Usage(_)
            | Error::Overlap(_)
            | Error::InfeasibleClusterSize(_)
            | Error::OracleGuard { .. }
            | Error::Shape(_) => 2,
            Error::Format { .. } => 3,
            Error::Factorization { .. }
            | Error::DenseFactorization
            | Error::DegenerateRepresentatives { .. }
            | Error::NonConvergence { .. } => 4,
            Error::Train { source, .. } => classify(source),
            Error::Io(_) => 1,
        }
    }
    classify(err)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        log::warn!("could not configure thread pool: {e}");
    }

    let result = match cli.command {
        Command::Generate(args) => commands::generate(args, threads),
        Command::Train(args) => commands::train(args, threads),
        Command::Predict(args) => commands::predict(args, threads, false),
        Command::Evaluate(args) => commands::predict(args, threads, true),
        Command::CompareOracle(args) => commands::compare_oracle(args, threads),
    };

    if let Err(err) = result {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(exit_code(&err));
    }
}
