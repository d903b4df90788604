//! `l2c` command line.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 invalid input, 3 success with
//! a degenerate-search flag (calibration bisection did not bracket the
//! target).

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::otsu::OtsuWeighting;
use crate::synth::SynthKind;
use crate::tensor_io::DType;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "L2C_THREADS";

#[derive(Parser, Debug)]
#[command(name = "l2c", version, about = "Logit statistics, calibration, code mapping and a toy conditioned decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Probability and Otsu statistics of a logit grid
    Analyze(AnalyzeArgs),
    /// Fit scale, bias, temperature and smoothing to target statistics
    Calibrate(CalibrateArgs),
    /// Map logits to expected code vectors and uncertainty features
    Map(MapArgs),
    /// Write a seeded synthetic logit corpus
    Synth(SynthArgs),
    /// Train the toy decoder
    ToyTrain(ToyTrainArgs),
    /// Sample latents with the toy decoder
    ToyDecode(ToyDecodeArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// N×K logit TensorFile
    pub logits: PathBuf,
    #[arg(long, default_value = "count")]
    pub otsu_weight: OtsuWeighting,
    /// Ranks kept in the profile CSV
    #[arg(long, default_value_t = 64)]
    pub top_n: usize,
    /// Calibration parameters applied before the softmax
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// JSON report path; stdout when absent
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Rank-profile CSV path
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// One or more N×K logit TensorFiles
    #[arg(required = true)]
    pub corpus: Vec<PathBuf>,
    /// Target statistics document
    #[arg(long, conflicts_with = "target_corpus")]
    pub target: Option<PathBuf>,
    /// Logit corpus whose uncalibrated statistics become the target
    #[arg(long)]
    pub target_corpus: Option<PathBuf>,
    /// Search configuration document
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    /// N×K logit TensorFile
    pub logits: PathBuf,
    /// K×D codebook TensorFile
    #[arg(long)]
    pub codebook: PathBuf,
    /// Calibration parameters; identity when absent
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub codes_out: PathBuf,
    #[arg(long)]
    pub uncertainty_out: PathBuf,
    #[arg(long, default_value = "f64")]
    pub dtype: DType,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: SynthKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f64")]
    pub dtype: DType,
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct DatasetArgs {
    /// M×H×W×C clean latents
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// M×h×w×D code vectors
    #[arg(long, requires = "uncertainty")]
    pub codes: Option<PathBuf>,
    /// M×h×w×4 uncertainty features
    #[arg(long, requires = "codes")]
    pub uncertainty: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ToyTrainArgs {
    /// Run configuration document; defaults when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat parameter TensorFile
    #[arg(long)]
    pub params_out: PathBuf,
    /// Loss trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write the synthetic train and test splits here
    #[arg(long)]
    pub dump_dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ToyDecodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Flat parameter TensorFile
    #[arg(long, required_unless_present = "oracle")]
    pub params: Option<PathBuf>,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Use the exact straight-path velocity towards `--latents`
    #[arg(long, requires = "latents")]
    pub oracle: bool,
    #[arg(long, default_value_t = 30)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// M×H×W×C sampled latents
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), Error> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_NUMERIC
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_INPUT;
    }
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
