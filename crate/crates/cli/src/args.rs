use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sivit::bagging::ShuffleScope;
use sivit::heads::{HeadWeights, RegHeadMode};
use sivit::train::{Strategy, UpdateMode};

#[derive(Parser, Debug)]
#[command(name = "sivit", version, about = "Shuffle-instances ViT experiments on synthetic cytology images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Write a synthetic dataset (PPM images, PGM masks, index.tsv).
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Train one model and save the best-validation checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Re-run the training recorded in a manifest.
    #[command(args_override_self = true)]
    Replay(ReplayArgs),
    /// Score a checkpoint on one split.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Train every (strategy, seed) pair and tabulate median test metrics.
    #[command(args_override_self = true)]
    Compare(CompareArgs),
    /// Train across patch sizes and tabulate median test metrics.
    #[command(args_override_self = true)]
    SweepPatch(SweepArgs),
    /// Finite-difference check of every differentiable op and the full loss.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Render attribution maps as PGM images.
    #[command(args_override_self = true)]
    Visualize(VisualizeArgs),
}

impl Cmd {
    pub fn config_file(&self) -> Option<&PathBuf> {
        match self {
            Cmd::Generate(a) => a.config.as_ref(),
            Cmd::Train(a) => a.train.config.as_ref(),
            Cmd::Compare(a) => a.train.config.as_ref(),
            Cmd::SweepPatch(a) => a.train.config.as_ref(),
            Cmd::Evaluate(a) => a.config.as_ref(),
            Cmd::Gradcheck(a) => a.config.as_ref(),
            Cmd::Visualize(a) => a.config.as_ref(),
            Cmd::Replay(_) => None,
        }
    }
}

fn weights(s: &str) -> Result<HeadWeights, String> {
    HeadWeights::parse(s).map_err(|e| e.to_string())
}

/// Comma-separated values given as one flag.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn list<T: std::str::FromStr>(s: &str) -> Result<List<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("'{}': {e}", p.trim())))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(List(items))
}

fn strategies(s: &str) -> Result<List<Strategy>, String> {
    list(s)
}

fn seeds(s: &str) -> Result<List<u64>, String> {
    list(s)
}

fn sizes(s: &str) -> Result<List<usize>, String> {
    list(s)
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub pos: usize,
    #[arg(long, default_value_t = 64)]
    pub neg: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Cell categories; the highest one is cancer.
    #[arg(long, default_value_t = 2)]
    pub k: u8,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Hold out this many samples as `val/` (writes train/val/test subdirectories).
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Skip color casts, impurities and blur.
    #[arg(long)]
    pub clean: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Loss weights CLS:REG_USF:REG_SF.
    #[arg(long, value_parser = weights)]
    pub head_weights: Option<HeadWeights>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Attention heads per block.
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// per_token | pool_then_mlp
    #[arg(long)]
    pub reg_mode: Option<RegHeadMode>,
    /// Regress raw patch-label sums instead of bag means.
    #[arg(long)]
    pub raw_labels: bool,
    /// combined | two_updates
    #[arg(long)]
    pub update_mode: Option<UpdateMode>,
    /// batch | within_bag
    #[arg(long)]
    pub shuffle_scope: Option<ShuffleScope>,
    /// Central crop only; no rotation, flips or color jitter.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub crop_frac: Option<f64>,
    #[arg(long)]
    pub cutout_frac: Option<f64>,
    #[arg(long)]
    pub mix_alpha: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train | val | test (default: test when present, else val)
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub crop_frac: Option<f64>,
    /// Also write the metrics as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long, value_parser = strategies, default_value = "naive,cutout,mixup,cutmix,si")]
    pub strategies: List<Strategy>,
    #[arg(long, value_parser = seeds, default_value = "0,1,2")]
    pub seeds: List<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long, value_parser = sizes, default_value = "4,8,16")]
    pub sizes: List<usize>,
    #[arg(long, value_parser = seeds, default_value = "0")]
    pub seeds: List<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = seeds, default_value = "1,2,3,4,5")]
    pub seeds: List<u64>,
    #[arg(long, default_value_t = sivit::gradsuite::GRAD_TOL)]
    pub tol: f64,
    /// Only cases whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Regroup patches across each batch before attributing.
    #[arg(long)]
    pub shuffled: bool,
    /// train | val | test (default: test when present, else val)
    #[arg(long)]
    pub split: Option<String>,
    /// Class whose logit is explained: 0, 1 or "predicted".
    #[arg(long, default_value = "1")]
    pub target: String,
    #[arg(long)]
    pub crop_frac: Option<f64>,
    /// Batch size used for shuffling.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
