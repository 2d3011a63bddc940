//! `hsi`: simulate coded-aperture snapshots, reconstruct them with FISTA or
//! an unfolded network, train, evaluate and gradient-check.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsi_autodiff::checkpoint::CheckpointError;
use hsi_autodiff::TensorError;
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_FAILED_CHECKS: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hsi_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{failed} of {total} gradient checks exceeded tolerance")]
    ChecksFailed { failed: usize, total: usize },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

fn core_exit_code(e: &hsi_core::Error) -> u8 {
    use hsi_core::Error as E;
    match e {
        E::Format { .. } | E::Checkpoint(CheckpointError::Format { .. }) => EXIT_FORMAT,
        E::Diverged { .. } | E::NonFiniteLoss { .. } | E::Tensor(TensorError::NonFinite { .. }) => EXIT_NUMERICAL,
        E::Stage { source, .. } => core_exit_code(source),
        _ => EXIT_USAGE,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) => core_exit_code(e),
            Self::Usage(_) => EXIT_USAGE,
            Self::ChecksFailed { .. } => EXIT_FAILED_CHECKS,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "hsi",
    version,
    about = "Coded-aperture spectral imaging: simulate, reconstruct, train"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene cube and a random binary mask.
    Synth(SynthArgs),
    /// Encode a cube into a snapshot measurement.
    Simulate(SimulateArgs),
    /// Recover a cube from a measurement.
    Reconstruct(ReconstructArgs),
    /// Train the unfolded network on synthetic scenes.
    Train(TrainArgs),
    /// Print PSNR and SSIM of a prediction against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train a baseline and a switched configuration and compare them.
    Ablate(AblateArgs),
    /// Export one band of a cube as an 8-bit PGM image.
    ExportBand(ExportBandArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Dispersion step in pixels per band.
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Fista,
    Aspun,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    pub algo: Algo,
    #[arg(long)]
    pub meas: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network weights; required for `--algo aspun`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of the objective per iteration (fista only).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Band count; inferred from the measurement width when `d > 0`.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Dispersion step; defaults to `data.dispersion` of the config.
    #[arg(long)]
    pub d: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all`, or the name of one op or network block.
    #[arg(long, default_value = "all")]
    pub op: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `NAME=off`, `NAME=on` or `NAME=VALUE` for a `net.NAME` key; repeatable.
    #[arg(long = "switch", required = true)]
    pub switches: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportBandArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub band: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &mut out),
        Command::Simulate(a) => commands::simulate(&a, &mut out),
        Command::Reconstruct(a) => commands::reconstruct(&a, &mut out),
        Command::Train(a) => commands::train(&a, &mut out),
        Command::Eval(a) => commands::eval(&a, &mut out),
        Command::Gradcheck(a) => commands::gradcheck(&a, &mut out),
        Command::Ablate(a) => commands::ablate(&a, &mut out),
        Command::ExportBand(a) => commands::export_band(&a, &mut out),
    }
}
