//! `euclidnet` command-line driver.
//!
//! Exit status: 0 ok, 1 configuration, 2 data, 3 numeric, 4 checkpoint.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use euclidnet::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "euclidnet", version, about = "Train, fine-tune, quantise and probe similarity-generalised CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune a convolution checkpoint into a Euclid model along the homotopy schedule.
    Finetune(FinetuneArgs),
    /// Report top-1/top-5 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Post-training int8 quantisation of a Euclid checkpoint.
    Quantize(QuantizeArgs),
    /// Multiplier-count comparison of n-bit multiply against n-bit square.
    Cost(CostArgs),
    /// Accuracy under contrast/brightness, blur or noise sweeps.
    Robustness(RobustnessArgs),
    /// Dump S(x, w) on a grid, one CSV per similarity kind.
    Simfield(SimfieldArgs),
    /// Write a synthetic digit dataset as IDX files plus a starter config.
    GenData(GenDataArgs),
}

/// Data and output flags shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config with [model], [train], [data], [homotopy] and [output] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Number of epochs (must be ≥ 1).
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Per-layer gradient normalisation strength for similarity weights.
    #[arg(long)]
    pub eta: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep batchnorm running statistics fixed.
    #[arg(long)]
    pub freeze_bn: bool,
    /// Write outputs here instead of a generated run directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Parent directory for generated run directories (default `runs`).
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Similarity kind: conv, euclid, adder, mfo, synapse or homotopy(λ).
    #[arg(long)]
    pub sim: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Convolution checkpoint to start from.
    #[arg(long = "from")]
    pub from: PathBuf,
    /// Starting λ of the schedule, in (0, 1).
    #[arg(long)]
    pub lambda0: Option<f32>,
}

/// Evaluation data: explicit IDX files or the test split of a config.
#[derive(Debug, Clone, Args)]
pub struct EvalData {
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Config whose [data] test split is used when --images/--labels are absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: EvalData,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    /// Number of calibration images taken from the calibration set.
    #[arg(long, default_value_t = 1000)]
    pub calib: usize,
    /// Calibration images (default: the config's training split).
    #[arg(long)]
    pub calib_images: Option<PathBuf>,
    #[arg(long)]
    pub calib_labels: Option<PathBuf>,
    #[command(flatten)]
    pub data: EvalData,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Operand width in bits.
    #[arg(long)]
    pub n: u32,
    /// Multiplier width in bits; n must equal m·2^k.
    #[arg(long)]
    pub m: u32,
    /// Use three-product Karatsuba tiling instead of four products.
    #[arg(long)]
    pub true_karatsuba: bool,
    /// Multiply-accumulate count the totals are scaled by.
    #[arg(long, default_value_t = 1)]
    pub macs: u64,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Transform,
    Blur,
    Noise,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Second checkpoint; adds its rows and a delta grid (first − second).
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Contrast values, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a: Option<Vec<f32>>,
    /// Brightness values, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub b: Option<Vec<f32>>,
    /// Blur or noise standard deviations, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f32>>,
    /// Odd blur kernel sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ksizes: Option<Vec<usize>>,
    /// Clip transformed pixels to [0, 1].
    #[arg(long)]
    pub clip: bool,
    /// Seed of the additive-noise stream.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[command(flatten)]
    pub data: EvalData,
}

#[derive(Debug, Args)]
pub struct SimfieldArgs {
    /// Kinds to dump, comma separated, or `all`.
    #[arg(long, default_value = "all")]
    pub kind: String,
    /// Sampling range `lo:hi` applied to both axes.
    #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
    pub range: String,
    /// Samples per axis (≥ 2).
    #[arg(long, default_value_t = 61)]
    pub steps: usize,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test: usize,
    /// Image side length.
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::Checkpoint => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Cost(a) => commands::cost(a),
        Command::Robustness(a) => commands::robustness(a),
        Command::Simfield(a) => commands::simfield(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
