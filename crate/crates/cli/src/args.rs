use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::PredicateSection;

/// Referring-expression segmentation dataset pipeline.
#[derive(Debug, Parser)]
#[command(name = "refseg", version)]
pub struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic labelled scenes (labels/ and images/).
    Synth(SynthArgs),
    /// Cut a large scene into resampled square crops.
    Tile(TileArgs),
    /// Generate masks and the triplet manifest for a scene directory.
    Generate(GenerateArgs),
    /// Assign scene-disjoint train/val/test splits.
    Split(SplitArgs),
    /// Foreground-ratio histogram and verdict counts.
    Stats(StatsArgs),
    /// Score predicted masks against the manifest.
    Evaluate(EvaluateArgs),
    /// Run the LGCE invariant suite.
    LgceCheck(LgceCheckArgs),
    /// Serve the curation API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Label raster (one class id per pixel).
    #[arg(long)]
    pub labels: PathBuf,
    /// Matching RGB image, cropped alongside the labels.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Scene directory to write crops into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1200)]
    pub window: usize,
    #[arg(long, default_value_t = 600)]
    pub stride: usize,
    #[arg(long, default_value_t = 512)]
    pub output_side: usize,
    /// Scene id prefix; defaults to the label file stem.
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredicateFlags {
    #[arg(long)]
    pub buffer_radius: Option<usize>,
    #[arg(long)]
    pub tau_on: Option<f64>,
    #[arg(long)]
    pub tau_surround: Option<f64>,
    /// 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u8>,
}

impl PredicateFlags {
    pub fn section(&self) -> PredicateSection {
        PredicateSection {
            buffer_radius: self.buffer_radius,
            tau_on: self.tau_on,
            tau_surround: self.tau_surround,
            connectivity: self.connectivity,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory with labels/<scene>.png and images/<scene>.png.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub predicate: PredicateFlags,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Replace an existing manifest and mask tree.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to rewriting the input manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train,val,test scene shares.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    /// Write the histogram CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of <id>.png predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Count IoU equal to θ as a hit.
    #[arg(long)]
    pub inclusive: bool,
    /// Report directory; defaults to `eval/` next to the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LgceCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random configurations per structural check.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub grad_seeds: usize,
    /// Test hook: scale every analytic gradient by 1 + FAULT.
    #[arg(long, hide = true)]
    pub inject_grad_fault: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Verdict log; defaults to verdicts.jsonl next to the manifest.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Directory served at / (the built review UI).
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Leave pending triplets out of exports.
    #[arg(long)]
    pub exclude_pending: bool,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}
