mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "qstate", version, about = "Simulate measurements on single-mode light and reconstruct the state")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from a JSON config.
    Simulate(SimulateArgs),
    /// Reconstruct a state or phase-space function from a dataset.
    Reconstruct(ReconstructArgs),
    /// Compare two reports (or a report and a truth state).
    Compare(CompareArgs),
    /// Summarize a report and write plot data.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (defaults to $QSTATE_OUT_DIR or the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of phases (homodyne) or circle points (displaced).
    #[arg(long)]
    pub phases: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Dataset CSV (its JSON sidecar is read from the same stem).
    pub dataset: PathBuf,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Truth state (density-matrix JSON) for a fidelity check.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Fock cutoff, highest moment order or highest phase moment.
    #[arg(long = "n-max")]
    pub n_max: Option<usize>,
    #[arg(long = "z-cut")]
    pub z_cut: Option<f64>,
    /// Tikhonov parameter for circle inversion.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Singular-value cutoff for circle inversion.
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Ordering parameter for fbp and pointwise.
    #[arg(long, allow_hyphen_values = true)]
    pub s: Option<f64>,
    /// Allow fbp beyond the stable ordering limit.
    #[arg(long)]
    pub allow_unstable: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    pub report: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TAIL: u8 = 3;
pub const EXIT_INCOMPATIBLE: u8 = 4;
pub const EXIT_METHOD: u8 = 5;

pub fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("QSTATE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &argv),
        Command::Reconstruct(a) => commands::reconstruct(a, &argv),
        Command::Compare(a) => commands::compare(a, &argv),
        Command::Report(a) => commands::report(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
