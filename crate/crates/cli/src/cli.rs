//! Command-line argument definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lfmark", version, about = "Latent-frequency image watermarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a watermark key file.
    GenKey(GenKeyArgs),
    /// Embed messages into images.
    Embed(EmbedArgs),
    /// Decode messages from images.
    Decode(DecodeArgs),
    /// Decide whether images carry an expected message.
    Detect(DetectArgs),
    /// Apply an attack battery and write the attacked images.
    Attack(AttackArgs),
    /// Score watermarked images under an attack battery.
    Evaluate(EvaluateArgs),
    /// Embed and evaluate over a parameter grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenKeyArgs {
    #[arg(long, default_value_t = 48)]
    pub bits: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    /// canonical-basis or random-orthonormal
    #[arg(long, default_value = "random-orthonormal")]
    pub scheme: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = lfmark_core::keys::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub key: PathBuf,
    /// Message as a 0/1 string, shared by every image.
    #[arg(long, conflicts_with = "message_seed")]
    pub message: Option<String>,
    /// Seed of per-image random messages (image i uses seed + i).
    #[arg(long)]
    pub message_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Image files or directories.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON lines to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Image files or directories.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub key: PathBuf,
    /// Expected message as a 0/1 string.
    #[arg(long, conflicts_with = "manifest")]
    pub message: Option<String>,
    /// Manifest mapping image names to expected messages.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub target_fpr: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Image files or directories.
    pub inputs: Vec<PathBuf>,
    /// JSON battery file; the default battery when omitted.
    #[arg(long)]
    pub battery: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of watermarked images.
    #[arg(long)]
    pub watermarked: PathBuf,
    #[arg(long)]
    pub battery: Option<PathBuf>,
    #[arg(long)]
    pub key: PathBuf,
    /// Defaults to `manifest.json` inside the watermarked directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// PSNR loss weight.
    Quality,
    Bits,
    LatentNoise,
    PixelNoise,
    Steps,
    Domain,
    /// Latent noise × pixel noise matrix.
    NoiseGrid,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Quality => "quality",
            SweepAxis::Bits => "bits",
            SweepAxis::LatentNoise => "latent-noise",
            SweepAxis::PixelNoise => "pixel-noise",
            SweepAxis::Steps => "steps",
            SweepAxis::Domain => "domain",
            SweepAxis::NoiseGrid => "noise-grid",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated grid; for noise-grid, the latent noise values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Pixel noise values of the noise-grid axis.
    #[arg(long, value_delimiter = ',')]
    pub pixel_values: Vec<f64>,
    #[arg(long)]
    pub battery: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    pub bits: usize,
    #[arg(long, default_value = "canonical-basis")]
    pub scheme: String,
    #[arg(long, default_value_t = 0)]
    pub key_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub message_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}
