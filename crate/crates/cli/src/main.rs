//! `upt` — command-line front end for the upt-core physics surrogate.
//!
//! Subcommands cover the full experiment loop: dataset generation with
//! governing-equation residual checks, training with resumable checkpoints,
//! one-step evaluation, latent/autoregressive rollouts, discretization
//! sweeps, the finite-difference gradient suite, and metrics plotting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
//! Given the same binary, config, and seed, every command writes identical
//! bytes for all non-timing outputs.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Errors split by exit code: usage/config problems exit 2, everything else
/// (I/O, numerics, missing files at runtime) exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<upt_core::Error> for CliError {
    fn from(e: upt_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "upt",
    version,
    about = "Point-cloud physics surrogate: encode to a fixed latent, step in latent space, decode anywhere."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Tgv2d,
    Diffusion2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Latent,
    Autoregressive,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an analytic dataset and write it with a manifest.
    GenData(GenDataArgs),
    /// Train a model; writes config echo, metrics CSV, and checkpoints.
    Train(TrainArgs),
    /// One-step test MSE and correlation time of a checkpoint.
    Eval(EvalArgs),
    /// Roll a checkpoint forward in time and compare against the data.
    Rollout(RolloutArgs),
    /// One-step MSE across input resolutions and supernode counts.
    Sweep(SweepArgs),
    /// Finite-difference gradient suite; exits 0 only if every check passes.
    Gradcheck,
    /// Re-render the SVG charts from a metrics CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points (or particles) per frame. Default: 2500 (tgv2d) / 256 (diffusion2d).
    #[arg(long)]
    pub k: Option<usize>,
    /// Frames per trajectory. Default: 126 (tgv2d) / 201 (diffusion2d).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Frame spacing in simulation time. Default: 0.05 (tgv2d) / 0.01 (diffusion2d).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Viscosity of the vortex field (tgv2d only).
    #[arg(long)]
    pub nu: Option<f64>,
    /// Diffusivity of the heat field (diffusion2d only).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Number of heat blobs (diffusion2d only).
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Trajectories to generate before splitting.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Train,val,test fractions; must sum to 1.
    #[arg(long, default_value = "0.5,0.25,0.25")]
    pub splits: String,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config JSON; defaults apply for every omitted field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: config.json, metrics.csv, checkpoints/, plots/.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from; the schedule resumes at the exact step.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train.peak_lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Pause after this many epochs (full schedule kept); continue later
    /// with --resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Suppress the per-epoch progress line.
    #[arg(long, default_value_t = false)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write eval.json (defaults to the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Trajectory index (within the split) for the correlation-time rollout.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// May repeat to run several modes in one invocation.
    #[arg(long = "mode", value_enum)]
    pub modes: Vec<ModeArg>,
    /// Rollout length in model time steps (clamped to the data horizon).
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Trajectory index within the split.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    /// Decode on an N x N grid over the domain instead of at data positions.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Input-count multipliers relative to --base-k.
    #[arg(long, default_value = "0.5,1.0,1.5")]
    pub multipliers: String,
    /// Absolute supernode counts; default 0.5x/1x/2x the training value.
    #[arg(long)]
    pub supernodes: Option<String>,
    /// Input points at multiplier 1.0; default: the split's frame size.
    #[arg(long)]
    pub base_k: Option<usize>,
    /// Queries per evaluated pair; default: the training query count.
    #[arg(long)]
    pub query_count: Option<usize>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Metrics CSV produced by train.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Directory for the rendered SVG charts.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => commands::gen_data(&args),
        Cmd::Train(args) => commands::train(&args),
        Cmd::Eval(args) => commands::eval(&args),
        Cmd::Rollout(args) => commands::rollout(&args),
        Cmd::Sweep(args) => commands::sweep(&args),
        Cmd::Gradcheck => commands::gradcheck(),
        Cmd::Plot(args) => commands::plot(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
