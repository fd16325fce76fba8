//! `vtp`: train, evaluate, ablate and inspect VTPNet models.
//!
//! Exit codes:
//!
//! | code | meaning                                          |
//! |------|--------------------------------------------------|
//! | 0    | success                                          |
//! | 1    | a check failed (gradient check)                  |
//! | 2    | usage: bad arguments, missing input files        |
//! | 3    | validation: bad config, malformed file, mismatch |
//! | 4    | runtime: I/O or numerical failure                |

mod ablate;
mod data;
mod eval;
mod failure;
mod gradcheck;
mod infer;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "vtp", version, about = "Voxel-Transformer-Point networks for point clouds")]
struct Cli {
    /// Run on one thread so results are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train one model per ablation variant and tabulate scores.
    Ablate(AblateArgs),
    /// Write a synthetic dataset to disk with a manifest.
    GenData(GenDataArgs),
    /// Predict a class or per-point parts for one cloud.
    Infer(InferArgs),
    /// Write a part prediction as a colored PLY.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop once this eval-split score (OA or mIoU) is reached.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split of the checkpoint's own data source.
    #[arg(long, value_enum, default_value_t = data::Split::Eval)]
    pub split: data::Split,
    /// Evaluate on a manifest instead of the configured data.
    #[arg(long, conflicts_with = "split")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `all` or the name of one check.
    #[arg(default_value = "all")]
    pub scope: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Axes to run; all three by default.
    #[arg(long, value_delimiter = ',')]
    pub axes: Vec<String>,
    /// Number of seeds per variant (seeds 0, 1, ...).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value = "seg")]
    pub task: String,
    /// Comma-separated shape names; every shape by default.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub clouds: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = data::FileFormat::Ply)]
    pub format: data::FileFormat,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cloud file (`.ply` or `.xyzn`) with normals.
    #[arg(long)]
    pub input: PathBuf,
    /// Category of the cloud; required for segmentation models.
    #[arg(long)]
    pub category: Option<usize>,
    /// Write the cloud with predicted labels (`.ply` or `.xyzn`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub category: usize,
    /// Binary PLY to write.
    #[arg(long)]
    pub output: PathBuf,
}

fn configure_threads(deterministic: bool) -> Result<(), Failure> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("VTP_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Failure::Usage(format!("VTP_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("cannot configure worker threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.deterministic)?;
    match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Ablate(a) => ablate::run(&a),
        Command::GenData(a) => data::gen_data(&a),
        Command::Infer(a) => infer::infer(&a),
        Command::Export(a) => infer::export(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            if let Failure::Usage(_) = f {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(f.code())
        }
    }
}
