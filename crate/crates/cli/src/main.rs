//! `nbf`: synthetic data, training, streaming generation, verification and
//! benchmarks for the block-autoregressive denoiser.

mod commands;
mod config;
mod dataset;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "nbf", version, about = "Block-autoregressive diffusion with a bounded ConvKV cache")]
struct Cli {
    /// `key = value` file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic latent dataset.
    Data(DataArgs),
    /// Train a denoiser (stage 1) or its ConvKV compressor (stage 2).
    Train(TrainArgs),
    /// Stream-generate latents from a checkpoint.
    Generate(GenerateArgs),
    /// Run an invariant suite and print `CHECK` lines.
    Verify(VerifyArgs),
    /// Per-block latency with and without compression.
    Bench(BenchArgs),
    /// Research experiments that go beyond the invariant checks.
    #[command(subcommand)]
    Experiment(Experiment),
    /// Print the resolved configuration with descriptions.
    Config,
}

#[derive(Args)]
pub struct DataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub delta_u: Option<f64>,
    #[arg(long)]
    pub eps_r: Option<f64>,
    #[arg(long)]
    pub state_dim: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub ambient_dim: Option<usize>,
    #[arg(long)]
    pub nonlinearity: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stage: Option<u8>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `block-causal` or `none`.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_blocks: Option<usize>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub freeze_denoiser: Option<bool>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Euler steps per block.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub convkv: Option<OnOff>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequence: Option<usize>,
    /// `f64` or `f32`.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckName {
    Prop1,
    Prop2,
    Grad,
    Mask,
    CacheEquivalence,
    MemoryBound,
    Ledger,
    All,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub check: CheckName,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model for the generation checks; a randomized toy model otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset whose manifest bound `prop1` re-checks on reload.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub blocks: usize,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Boundary discontinuity of a non-causal model under three history modes.
    Zeroshot(ZeroShotArgs),
}

#[derive(Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Bad invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub enum Outcome {
    Success,
    CheckFailed,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Data(a) => commands::data(&mut cfg, a),
        Command::Train(a) => commands::train(&mut cfg, a),
        Command::Generate(a) => commands::generate(&mut cfg, a),
        Command::Verify(a) => verify::run(&mut cfg, a),
        Command::Bench(a) => commands::bench(&mut cfg, a),
        Command::Experiment(Experiment::Zeroshot(a)) => commands::zeroshot(&mut cfg, a),
        Command::Config => {
            for (key, _, doc) in config::KEYS {
                println!("# {doc}\n{key} = {}", cfg.raw(key));
            }
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
