mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixelrepa::Error;

/// Exit statuses.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

/// Environment variable naming the default directory for runs and reports.
pub const RUN_ROOT_ENV: &str = "PIXELREPA_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "pixelrepa", version, about = "Pixel-space diffusion with masked-adapter representation alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Subset, probe, metric and ablation reports.
    Analyze(AnalyzeArgs),
    /// Gradient, integrator and invariant self-checks.
    Verify,
    /// Write a synthetic dataset directory.
    MakeDataset(MakeDatasetArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override one key, e.g. `--set alignment.variant=mta` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Validate and print the canonical config without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Run directory (default: $PIXELREPA_RUN_ROOT/<config stem>-<hash>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Print a progress line every this many steps (0: quiet).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sampler steps (default from the checkpoint's config: 50).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale.
    #[arg(long)]
    pub w: Option<f64>,
    /// Guidance interval `lo,hi`.
    #[arg(long)]
    pub interval: Option<String>,
    /// EMA decay to sample from, or `none` for raw parameters.
    #[arg(long)]
    pub ema: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated class ids (default: every class once).
    #[arg(long)]
    pub classes: Option<String>,
    /// Output directory (default: the run's samples/).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File stem for the outputs.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Centroids,
    DenoiseProbe,
    Metrics,
    AblateMask,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    pub mode: AnalyzeMode,
    /// Dataset directory written by make-dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Precomputed feature directory (instead of encoding images).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Checkpoints to probe (repeatable).
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Sample tensors (`.f32` with `.json` sidecar) to score (repeatable).
    #[arg(long)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t0: Option<f64>,
    /// Comma-separated mask ratios.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub ema: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Shapes,
    Tightmode,
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    pub kind: Kind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tight_fraction: f64,
    /// Also write precomputed encoder feature shards under `<out>/features`.
    #[arg(long)]
    pub features: bool,
    /// Config whose `alignment.encoder` section produces the features.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub shard_size: usize,
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Verify => commands::verify(),
        Command::MakeDataset(a) => commands::make_dataset(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
