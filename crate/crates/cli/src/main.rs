//! `pdconv`: verification, analysis, data generation, training and evaluation
//! front end for the pixel-difference convolution library.
//!
//! Exit codes are stable: 0 success, 1 a check or operation failed, 2 bad
//! arguments or configuration, 3 a required file is missing, 4 a non-finite
//! loss or value stopped the run.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Failure = 1,
    BadArgs = 2,
    MissingFile = 3,
    NonFinite = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        CliError {
            exit,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<pdconv::Error> for CliError {
    fn from(e: pdconv::Error) -> Self {
        use pdconv::Error as E;
        let exit = match &e {
            E::Config(_) => Exit::BadArgs,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Exit::MissingFile,
            E::Divergence { .. } | E::Numeric { .. } => Exit::NonFinite,
            _ => Exit::Failure,
        };
        CliError::new(exit, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pdconv", version, about = "Pixel-difference convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Compare the definitional and rewritten PDC forms on random layers.
    Equivalence(EquivalenceArgs),
    /// Measure receptive-field support maps by gradient probing.
    Rfmap(RfmapArgs),
    /// Time the convolution operators and report multiply-accumulate counts.
    Bench(BenchArgs),
    /// Generate a synthetic RGB-D segmentation dataset.
    Gen(GenArgs),
    /// Train the toy two-branch network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check a single op or composite; all of them by default.
    #[arg(long)]
    pub op: Option<String>,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Verification dtype; only f64 reaches the tolerance.
    #[arg(long, default_value = "f64")]
    pub dtype: String,
    /// Print one line per checked tensor.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct EquivalenceArgs {
    /// Number of random PDC instances.
    #[arg(long, default_value_t = 200)]
    pub seeds: usize,
    /// Seed of the first instance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RfmapArgs {
    /// single5, single7d3, cascade, parallel, cpdc or all.
    #[arg(long, default_value = "all")]
    pub mode: String,
    /// Print each support map as an ASCII heat map.
    #[arg(long)]
    pub ascii: bool,
    /// Directory receiving one `<mode>.pdt` count map per mode.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Square map sizes.
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    pub sizes: Vec<usize>,
    /// Channel counts.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub channels: Vec<usize>,
    /// Timed repetitions per operator; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Worker threads; defaults to PDCONV_THREADS or the machine's cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Run configuration whose `generator` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub depth_noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `pdconv gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset; otherwise the last `training.holdout` scenes of
    /// `--data` are held out.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Overrides `model.variant`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "run.pdck")]
    pub out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Expected variant; must match the checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    /// Include every effective α and each stage's η and λ.
    #[arg(long)]
    pub dump_params: bool,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

/// Applies `PDCONV_THREADS` to the global pool.
fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("PDCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(Exit::BadArgs, format!("PDCONV_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(Exit::Failure, e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    init_threads()?;
    match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Equivalence(a) => commands::equivalence(&a),
        Command::Rfmap(a) => commands::rfmap(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
