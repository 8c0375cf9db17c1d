mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthovit::Error;

/// Anatomy / image-characteristic autoencoder: data generation, pretraining,
/// evaluation, corruption revision and frozen-encoder probes.
#[derive(Parser, Debug)]
#[command(name = "orthovit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural dataset as train/val/test ORNC files (8:1:1).
    GenData(GenDataArgs),
    /// Pretrain the encoder and both decoders.
    Pretrain(PretrainArgs),
    /// Evaluate an autoencoder checkpoint on the test split.
    Eval(EvalArgs),
    /// Revision report plus (clean, corrupted, revised) image dumps.
    Revise(ReviseArgs),
    /// Train a classifier head on the frozen encoder and evaluate it.
    Probe(ProbeArgs),
    /// Evaluate a disease probe under held-out corruptions.
    Robustness(RobustnessArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Total images before the split.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    /// Number of classes, 2 to 8.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Channels per image.
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory holding train.ornc, or an ORNC file.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture preset: small (28×28×1) or large (224×224×3).
    #[arg(long, default_value = "small")]
    pub preset: String,
    /// key=value file overriding preset and defaults; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a pretraining checkpoint that stores optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Training epochs; 0 writes the initialized model.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Root seed for initialization, shuffling and corruptions.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak learning rate (default 1.5e-4 × batch/64 for pretraining).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Linear warmup length in epochs.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Stop after this many optimizer steps; the cosine schedule ends there.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Adam first-moment decay.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Training corruptions composed per image.
    #[arg(long)]
    pub corruptions_per_image: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    /// Pixels per square patch side.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Token width shared by encoder and decoders.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Transformer blocks per encoder and per decoder.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Attention heads per block.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Transformer blocks in the probe head.
    #[arg(long)]
    pub probe_depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepFlags {
    /// Comma-separated corruption kinds (default depends on the command).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    /// Comma-separated severities in 1..=3.
    #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3])]
    pub severities: Vec<u8>,
    /// Seed for evaluation corruptions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Autoencoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory holding test.ornc, or an ORNC file.
    #[arg(long)]
    pub data: PathBuf,
    /// reconstruction (clean PSNR/SSIM) or revision (training corruptions).
    #[arg(long)]
    pub protocol: String,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sweep: SweepFlags,
}

#[derive(Args, Debug)]
pub struct ReviseArgs {
    /// Autoencoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory holding test.ornc, or an ORNC file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Test images to revise and dump.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[command(flatten)]
    pub sweep: SweepFlags,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Autoencoder checkpoint (with --allow-missing) or probe checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory holding train.ornc and test.ornc.
    #[arg(long)]
    pub data: PathBuf,
    /// disease (dataset labels, clean inputs) or detect (corruption kind).
    #[arg(long)]
    pub task: String,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Load only the encoder from an autoencoder checkpoint, dropping the decoders.
    #[arg(long)]
    pub allow_missing: bool,
    /// key=value file with training keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    /// Autoencoder checkpoint whose encoder the probe was trained on.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Disease probe checkpoint.
    #[arg(long)]
    pub probe_ckpt: PathBuf,
    /// Dataset directory holding test.ornc, or an ORNC file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sweep: SweepFlags,
}

/// Process exit status per error class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Exit {
    Ok = 0,
    Internal = 1,
    /// Reserved by the argument parser for unknown or malformed flags.
    #[allow(dead_code)]
    Usage = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Mismatch = 6,
    NonFinite = 7,
}

fn exit_for(err: &Error) -> Exit {
    match err {
        Error::Config(_) => Exit::Config,
        Error::Io { .. } => Exit::Io,
        Error::Format { .. } => Exit::Format,
        Error::Mismatch(_) => Exit::Mismatch,
        Error::NonFinite { .. } => Exit::NonFinite,
        Error::Dimension { .. } | Error::State(_) | Error::Undefined(_) => Exit::Internal,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Revise(a) => commands::revise(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Robustness(a) => commands::robustness(&a),
    };
    match result {
        Ok(()) => ExitCode::from(Exit::Ok as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_has_help() {
        for sub in Cli::command().get_subcommands() {
            for arg in sub.get_arguments() {
                assert!(arg.get_help().is_some(), "{} --{} lacks help", sub.get_name(), arg.get_id());
            }
        }
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            Exit::Ok,
            Exit::Internal,
            Exit::Usage,
            Exit::Config,
            Exit::Io,
            Exit::Format,
            Exit::Mismatch,
            Exit::NonFinite,
        ];
        let mut seen: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
        seen.dedup();
        assert_eq!(seen.len(), codes.len());
    }
}
