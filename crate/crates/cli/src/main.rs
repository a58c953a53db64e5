//! `rowquant` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod dataset;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Raised for bad invocations that clap cannot see (missing files, bad
/// config keys). Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "rowquant", version, about = "Row-wise mixed-scheme quantization toolkit")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a float baseline from scratch.
    TrainBaseline(TrainBaselineArgs),
    /// Assign rows to PoT-W4A4 / Fixed-W4A4 / Fixed-W8A4 and fine-tune.
    Quantize(QuantizeArgs),
    /// Quantize one baseline at several PoT ratios.
    Sweep(SweepArgs),
    /// Report top-1 (and top-5) accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Analytic latency and utilization estimate on an FPGA profile.
    Cost(CostArgs),
    /// Write packed integer codes for the inference kernels.
    Export(ExportArgs),
    /// Generate a synthetic digit set in IDX format.
    SynthDigits(SynthDigitsArgs),
    /// Refit the shipped device profiles.
    FitProfiles(FitProfilesArgs),
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// Read `key = value` defaults from this file; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, env = "ROWQUANT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainOpts {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "cosine")]
    lr_schedule: String,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
}

#[derive(Args, Debug, Serialize)]
struct TrainBaselineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// IDX directory, `.csv` file, `gaussians:C:D:N[:SEED]` or
    /// `digits:TRAIN:TEST:SIZE[:SEED[:NOISE%[:FLIP%]]]`.
    #[arg(long)]
    data: String,
    /// Separate evaluation set (same forms as --data).
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long, default_value = "mlp-small")]
    arch: String,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Baseline checkpoint path (without `.manifest`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    val_data: Option<String>,
    /// PoT-W4A4:Fixed-W4A4:Fixed-W8A4 percentages.
    #[arg(long, default_value = "65:30:5")]
    ratio: String,
    /// Epochs between Hessian/variance reassignments.
    #[arg(long, default_value_t = rowquant::assign::DEFAULT_REASSIGN_INTERVAL)]
    reassign_interval: usize,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum WithW8 {
    True,
    False,
    Both,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    val_data: Option<String>,
    /// Comma-separated PoT-W4A4 percentages.
    #[arg(long, default_value = "0,50,90")]
    pot_ratios: String,
    /// Reserve 5% of rows for Fixed-W8A4.
    #[arg(long, value_enum, default_value_t = WithW8::Both)]
    with_w8: WithW8,
    #[arg(long, default_value_t = rowquant::assign::DEFAULT_REASSIGN_INTERVAL)]
    reassign_interval: usize,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainOpts,
    /// Concurrent runs, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Engine {
    Float,
    Integer,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset; for IDX directories and synthetic specs the test split is
    /// used.
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value_t = Engine::Float)]
    engine: Engine,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CostArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Built-in layer list (`resnet18`).
    #[arg(long, conflicts_with = "checkpoint")]
    shape: Option<String>,
    /// Take the layer list (and default ratio) from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Profile file or built-in device name (xc7z020, xc7z045).
    #[arg(long, default_value = "xc7z045")]
    device_profile: String,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthDigitsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long, default_value_t = 6000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 28)]
    size: usize,
    /// Std of pixel noise.
    #[arg(long, default_value_t = 0.12)]
    noise: f64,
    /// Endpoint jitter as a fraction of the glyph.
    #[arg(long, default_value_t = 0.07)]
    jitter: f64,
    /// Probability of toggling each segment.
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitProfilesArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = rowquant_hw::fit::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = rowquant_hw::fit::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainBaseline(a) => commands::train_baseline(&a),
        Command::Quantize(a) => commands::quantize(&a).map(|_| ()),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Export(a) => commands::export(&a),
        Command::SynthDigits(a) => commands::synth_digits(&a),
        Command::FitProfiles(a) => commands::fit_profiles(&a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
