use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eedlab_core::io::SynthKind;
use eedlab_core::metrics::{DEFAULT_NORM_SAMPLES, DEFAULT_SAMPLES};
use eedlab_core::{DistanceKind, FiniteGroup};

#[derive(Debug, Parser)]
#[command(
    name = "eedlab",
    version,
    about = "Empirical equivariance deviation for CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an EED report.
    Eed {
        #[command(subcommand)]
        metric: EedCommand,
    },
    /// Average minimum distance from rotated filters to other filters.
    FilterOrbit(FilterOrbitArgs),
    /// Write a seeded synthetic image dataset.
    Synthesize(SynthesizeArgs),
    /// Rotate (and optionally mask) a dataset by random group elements.
    RotateDataset(RotateArgs),
    /// Check group axioms and the action law for a group and action.
    Verify(VerifyArgs),
    /// Build an oracle or standard model and write its manifest.
    ModelInit(ModelInitArgs),
}

#[derive(Debug, Subcommand)]
pub enum EedCommand {
    /// Negative mean per-channel cosine similarity of a hidden stack.
    Channelwise {
        #[command(flatten)]
        common: CommonArgs,
        /// Action on the hidden stack; defaults to per-channel `--action`.
        #[arg(long)]
        hidden_action: Option<String>,
    },
    /// Distance of latent features to their orbit centroid.
    Latent {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "euclidean", value_parser = parse_distance)]
        metric: DistanceKind,
        /// Points used for the normalization constant.
        #[arg(long, default_value_t = DEFAULT_NORM_SAMPLES)]
        norm_samples: usize,
        /// Dataset for the normalization constant; defaults to `--data`.
        #[arg(long)]
        norm_data: Option<PathBuf>,
        /// Compute the normalization constant on the evaluation data itself.
        #[arg(long)]
        m_on_ood: bool,
        #[arg(long)]
        no_normalize: bool,
    },
    /// KL divergence of output distributions from their orbit mean.
    Softmax {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// The general metric for any layer and output action.
    Generic {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "euclidean", value_parser = parse_distance)]
        metric: DistanceKind,
        /// Action on the layer output.
        #[arg(long, default_value = "trivial")]
        output_action: String,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, default_value = "c4", value_parser = parse_group)]
    pub group: FiniteGroup,
    /// Input action: rot, reflect-v or trivial.
    #[arg(long, default_value = "rot")]
    pub action: String,
    /// Model manifest.
    #[arg(long, required_unless_present = "activations")]
    pub model: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, required_unless_present = "activations")]
    pub data: Option<PathBuf>,
    /// Number of leading layers to evaluate; defaults per metric.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Activation manifest with pre-computed orbits (replaces --model/--data).
    #[arg(long, conflicts_with_all = ["model", "data", "layer"], requires = "tap")]
    pub activations: Option<PathBuf>,
    /// Tap name inside the activation manifest.
    #[arg(long, requires = "activations")]
    pub tap: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Long-format CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Include the per-pair table in the JSON report.
    #[arg(long)]
    pub per_pair: bool,
}

#[derive(Debug, Args)]
pub struct FilterOrbitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Index of a conv2d or lifting layer.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value = "c4", value_parser = parse_group)]
    pub group: FiniteGroup,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthArg {
    GaussianBlobs,
    BandLimitedNoise,
}

impl From<SynthArg> for SynthKind {
    fn from(a: SynthArg) -> Self {
        match a {
            SynthArg::GaussianBlobs => SynthKind::GaussianBlobs,
            SynthArg::BandLimitedNoise => SynthKind::BandLimitedNoise,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, value_enum, default_value = "gaussian-blobs")]
    pub kind: SynthArg,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RotateArgs {
    /// Source dataset manifest.
    #[arg(
        long,
        required_unless_present = "idx_images",
        conflicts_with = "idx_images"
    )]
    pub data: Option<PathBuf>,
    /// IDX image file (with --idx-labels) as the source.
    #[arg(long, requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    #[arg(long, default_value = "c8", value_parser = parse_group)]
    pub group: FiniteGroup,
    #[arg(long)]
    pub mask: bool,
    /// Classes to drop, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "c4", value_parser = parse_group)]
    pub group: FiniteGroup,
    /// Action name as for `eed`, or `shift` for cyclic shifts of vectors.
    #[arg(long, default_value = "rot")]
    pub action: String,
    /// Spatial side (or vector length for `shift`) of the probe images.
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    /// Channels of the probe stack (for regular actions).
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    /// C4 group-convolution network.
    C4,
    /// Plain CNN.
    Standard,
}

#[derive(Debug, Args)]
pub struct ModelInitArgs {
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Base filters per block (c4) or channels per block (standard).
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest file stem; defaults to the model name.
    #[arg(long)]
    pub name: Option<String>,
}

fn parse_group(s: &str) -> Result<FiniteGroup, String> {
    s.parse().map_err(|e: eedlab_core::Error| e.to_string())
}

fn parse_distance(s: &str) -> Result<DistanceKind, String> {
    s.parse().map_err(|e: eedlab_core::Error| e.to_string())
}
