use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmvs::neural::adam::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DISPNET_LR, MASKNET_LR};
use mmvs::neural::train::DEFAULT_BATCH_SIZE;
use mmvs::neural::NetworkConfig;
use mmvs::sampling::{DEFAULT_BINS, DEFAULT_THETA_MAX, DEFAULT_THETA_MIN};
use serde::Serialize;

pub const SEED_ENV: &str = "MMVS_SEED";
pub const DEFAULT_PLANES: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "mmvs", version, about = "Multi-view depth from multiplane masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with exact depth.
    GenData(GenDataArgs),
    /// Choose sweep-plane depths.
    SamplePlanes(SamplePlanesArgs),
    /// Write the warp volume of one neighbour (debugging aid).
    BuildVolume(BuildVolumeArgs),
    /// Write ground-truth masks of a sample (debugging aid).
    MakeMasks(MakeMasksArgs),
    /// Train MaskNet or DispNet.
    Train(TrainArgs),
    /// Predict depth for one sample or a whole dataset.
    Predict(PredictArgs),
    /// Score predictions against a dataset's ground truth.
    Eval(EvalArgs),
    /// Decode a mask tensor into a depth map.
    DecodeMasks(DecodeMasksArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    /// Overridden by MMVS_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub neighbours: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 50.0)]
    pub focal: f64,
    /// Scene depth range as `min:max` metres.
    #[arg(long, default_value = "1:10", value_parser = parse_range)]
    pub depth_range: (f64, f64),
    /// Maximum rotation per axis-angle component, radians.
    #[arg(long, default_value_t = 0.02)]
    pub max_rotation: f64,
    /// Minimum translation magnitude per axis as `x,y,z`.
    #[arg(long, default_value = "0.15,0,0", value_parser = parse_triple)]
    pub translation_min: [f64; 3],
    #[arg(long, default_value = "0.3,0.05,0.05", value_parser = parse_triple)]
    pub translation_max: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[value(alias = "histogram")]
    Hist,
    Inverse,
}

#[derive(Debug, Args)]
pub struct SamplePlanesArgs {
    #[arg(long, value_enum, default_value_t = Scheme::Hist)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = DEFAULT_PLANES)]
    pub planes: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dmin: f64,
    /// Upper end of the inverse-depth range, or the histogram range
    /// (defaults to the deepest observed depth).
    #[arg(long)]
    pub dmax: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THETA_MIN)]
    pub theta_min: f64,
    #[arg(long, default_value_t = DEFAULT_THETA_MAX)]
    pub theta_max: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Dataset whose depths build the histogram.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Previously written histogram file.
    #[arg(long, conflicts_with = "data")]
    pub histogram: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVolumeArgs {
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub planes: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub neighbour: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeMasksArgs {
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub planes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Masknet,
    Dispnet,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Stage::Masknet)]
    pub stage: Stage,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub planes: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frozen MaskNet checkpoint (dispnet stage).
    #[arg(long)]
    pub masknet: Option<PathBuf>,
    /// Continue from this checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub iterations: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Defaults to the stage's learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = ADAM_BETA1)]
    pub beta1: f64,
    #[arg(long, default_value_t = ADAM_BETA2)]
    pub beta2: f64,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// Overridden by MMVS_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write an extra checkpoint every N iterations (0 disables).
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Train on the stored views only, without random flips and colour changes.
    #[arg(long)]
    pub no_augment: bool,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Single sample directory; `--out` is then a file.
    #[arg(long, conflicts_with = "data")]
    pub sample: Option<PathBuf>,
    /// Dataset root; `--out` is then a directory of `<sample>.mmvs` files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub planes: PathBuf,
    #[arg(long)]
    pub masknet: PathBuf,
    /// Not needed with `--decode-from-masks`.
    #[arg(long)]
    pub dispnet: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Neighbour indices to use, e.g. `0,1` or `0,0`; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub neighbours: Option<Vec<usize>>,
    /// Also write the fused masks here (single-sample mode).
    #[arg(long)]
    pub dump_masks: Option<PathBuf>,
    /// Decode depth from the fused masks instead of running DispNet.
    #[arg(long)]
    pub decode_from_masks: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<sample>.mmvs` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeMasksArgs {
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub planes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected min:max, got `{s}`"))?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
    Ok((lo, hi))
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad number `{t}`")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected x,y,z, got `{s}`"))
}

/// The seed flag unless MMVS_SEED is set.
pub fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

#[derive(Debug, Serialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub augment: bool,
}

/// Everything a training run depends on, as dumped by `train --dump-config`.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub planes: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub histogram_bins: usize,
    pub masknet_lr: f64,
    pub dispnet_lr: f64,
    pub optimizer: OptimizerConfig,
    pub network: NetworkConfig,
    pub data: Option<PathBuf>,
    pub planes_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_train_args(a: &TrainArgs, planes: usize, height: usize, width: usize) -> Result<Self> {
        let stage_lr = match a.stage {
            Stage::Masknet => MASKNET_LR,
            Stage::Dispnet => DISPNET_LR,
        };
        let mut network = NetworkConfig::new(planes, height, width);
        network.base_channels = a.base_channels;
        Ok(Self {
            stage: a.stage,
            seed: resolve_seed(a.seed)?,
            planes,
            theta_min: DEFAULT_THETA_MIN,
            theta_max: DEFAULT_THETA_MAX,
            histogram_bins: DEFAULT_BINS,
            masknet_lr: MASKNET_LR,
            dispnet_lr: DISPNET_LR,
            optimizer: OptimizerConfig {
                lr: a.lr.unwrap_or(stage_lr),
                beta1: a.beta1,
                beta2: a.beta2,
                eps: ADAM_EPS,
                batch_size: a.batch_size,
                iterations: a.iterations,
                augment: !a.no_augment,
            },
            network,
            data: a.data.clone(),
            planes_file: a.planes.clone(),
            out: a.out.clone(),
        })
    }
}
