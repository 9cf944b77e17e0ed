//! Command-line front end: preprocessing, TTA inference, coefficient
//! learning, evaluation, dataset splitting and phantom generation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 predictor failure.

pub mod cases;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ttafuse_core::coeffopt::Method;
use ttafuse_core::metrics::Connectivity;

pub use config::PipelineConfig;

/// A problem with how the tool was invoked or configured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A problem with the input data (missing files, unpaired cases, ...).
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PREDICTOR: i32 = 3;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use ttafuse_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<DataError>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parameter(_) => EXIT_USAGE,
                E::PredictorFailure { .. } | E::ContractViolation(_) => EXIT_PREDICTOR,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "ttafuse", version, about = "Weighted test-time-augmentation fusion for PET/CT lesion segmentation")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the number of processors.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window intensities and crop every case to its CT foreground.
    Preprocess {
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long = "out")]
        out_dir: PathBuf,
    },
    /// Fused TTA prediction for one preprocessed case.
    Tta {
        #[arg(long = "case")]
        case_dir: PathBuf,
        /// Binary mask output; the soft map is written next to it.
        #[arg(long = "out")]
        out_path: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Learn contribution coefficients on validation cases.
    Optimize {
        #[arg(long = "val")]
        val_dir: PathBuf,
        /// Coefficient JSON output; the report goes to `<stem>.report.json`.
        #[arg(long = "out")]
        out_path: PathBuf,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long = "pred")]
        pred_dir: PathBuf,
        #[arg(long = "gt")]
        gt_dir: PathBuf,
        /// JSON report; a CSV copy is written next to it.
        #[arg(long = "report")]
        report_path: PathBuf,
        #[arg(long, value_parser = parse_connectivity)]
        connectivity: Option<Connectivity>,
    },
    /// Partition case ids into train / evaluation / test lists.
    Split {
        /// Text file with one id per line, or a directory of case folders.
        #[arg(long = "cases")]
        case_list: PathBuf,
        #[arg(long = "out")]
        out_path: PathBuf,
        /// Comma-separated train,evaluation,test fractions.
        #[arg(long, value_parser = parse_list::<f64, 3>)]
        fractions: Option<[f64; 3]>,
    },
    /// Generate a seeded phantom dataset.
    Synth {
        #[arg(long = "out")]
        out_dir: PathBuf,
        #[arg(long = "cases", default_value_t = 10)]
        n_cases: usize,
        #[arg(long, value_parser = parse_list::<usize, 3>, default_value = "64,64,64")]
        dims: [usize; 3],
        /// Inclusive lesion-count range, e.g. `1,4`.
        #[arg(long, value_parser = parse_list::<usize, 2>, default_value = "1,4")]
        lesions: [usize; 2],
    },
}

/// Parses exactly `N` comma-separated values.
fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("`{p}` is not a valid number")))
        .collect::<Result<_, _>>()?;
    let got = parts.len();
    parts.try_into().map_err(|_| format!("expected {N} comma-separated values, got {got}"))
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    let v: u8 = s.parse().map_err(|_| format!("`{s}` is not 6, 18 or 26"))?;
    Connectivity::try_from(v)
}

/// Parses `args` and runs the selected command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(ttafuse_core::Error::PredictorFailure { diagnostics, .. }) =
                e.chain().find_map(|c| c.downcast_ref::<ttafuse_core::Error>())
            {
                if !diagnostics.is_empty() {
                    eprintln!("{diagnostics}");
                }
            }
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.jobs == Some(0) {
        anyhow::bail!(UsageError("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| UsageError(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&config, cli.command))
}
