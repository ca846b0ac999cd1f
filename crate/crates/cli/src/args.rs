use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use cpab::fit::{FitConfig, LrSchedule, Optimizer};
use cpab::integrate::EXPORT_STEPS;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cpab", version, about = "CPA-based diffeomorphic keypoint motion: fit, export, warp, compose")]
pub struct Cli {
    /// Write a JSON run manifest (config, input digests, outputs, timings, losses).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Build the CPA velocity basis for an nx×ny tessellation of the unit square.
    Basis(BasisArgs),
    /// Fit θ so the transformation maps driving keypoints onto source keypoints.
    Fit(FitArgs),
    /// Integrate θ over a pixel grid and export the backward flow.
    Flow(FlowArgs),
    /// Backward-warp an image with a flow.
    Warp(WarpArgs),
    /// Blend a background affine map and several flows with per-pixel masks.
    Compose(ComposeArgs),
    /// Thin-plate-spline baseline flow from the same keypoints.
    Tps(TpsArgs),
    /// Seeded end-to-end run: ground truth, CPAB and TPS fits, comparison report.
    Synthetic(SyntheticArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Basis(_) => "basis",
            Command::Fit(_) => "fit",
            Command::Flow(_) => "flow",
            Command::Warp(_) => "warp",
            Command::Compose(_) => "compose",
            Command::Tps(_) => "tps",
            Command::Synthetic(_) => "synthetic",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BasisArgs {
    #[arg(long)]
    pub nx: usize,
    #[arg(long)]
    pub ny: usize,
    /// Require the velocity's normal component to vanish on the domain boundary.
    #[arg(long)]
    pub zero_boundary: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Debug, Args, Serialize)]
pub struct FitFlags {
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_epsilon: f64,
    /// Integration steps used inside the fitting loop.
    #[arg(long, default_value_t = 32)]
    pub n_steps_fit: usize,
}

impl FitFlags {
    pub fn config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            learning_rate: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::AdaptiveMoment,
                OptimizerArg::Gd => Optimizer::PlainGradientDescent,
            },
            fd_epsilon: self.fd_epsilon,
            n_steps_fit: self.n_steps_fit,
            schedule: match self.schedule {
                ScheduleArg::Cosine => LrSchedule::Cosine,
                ScheduleArg::Constant => LrSchedule::Constant,
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("mode").required(true).args(["global", "set", "all_sets"])))]
pub struct FitArgs {
    /// Source keypoints, `{"sets": [[[x, y], ...], ...]}`.
    #[arg(long)]
    pub src: PathBuf,
    /// Driving keypoints, same layout as `--src`.
    #[arg(long)]
    pub drv: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    /// One θ over all sets combined.
    #[arg(long)]
    pub global: bool,
    /// Fit only the set with this index.
    #[arg(long)]
    pub set: Option<usize>,
    /// One θ per set; outputs become JSON arrays.
    #[arg(long)]
    pub all_sets: bool,
    #[command(flatten)]
    pub fit: FitFlags,
    /// θ output (JSON).
    #[arg(long, short)]
    pub out: PathBuf,
    /// Loss trace CSV; row 0 is the loss at θ = 0.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Full fit result JSON (θ, losses, trace).
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FlowArgs {
    #[arg(long)]
    pub theta: PathBuf,
    /// Basis file; rebuilt from θ's tessellation when omitted.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = EXPORT_STEPS)]
    pub n_steps: usize,
    /// `.flo` or `.json`.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Displacement-magnitude visualization.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct WarpArgs {
    /// PNG, PPM or PGM.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Plain-text PNM output.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// All weight on the map chosen by `--mask-index` (0 = background).
    OneHot,
    Uniform,
    /// Gaussian bumps around driving-set centroids; flows must be the N local ones then the global one.
    Keypoints,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("bg").required(true).args(["background", "bg_src"])))]
#[command(group(ArgGroup::new("weights").required(true).args(["masks", "mask_mode"])))]
pub struct ComposeArgs {
    /// Flows to blend, in mask order after the background.
    #[arg(long = "flow", required = true)]
    pub flows: Vec<PathBuf>,
    /// Background affine map, `{"A": [[..3], [..3]]}`.
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// Fit the background affine map from these source keypoints (with `--bg-drv`).
    #[arg(long, requires = "bg_drv")]
    pub bg_src: Option<PathBuf>,
    #[arg(long, requires = "bg_src")]
    pub bg_drv: Option<PathBuf>,
    /// Mask stack: JSON `{"height","width","maps"}` or multi-page PGM.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Rescale mask files to sum to one per pixel instead of rejecting them.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long, default_value_t = 0)]
    pub mask_index: usize,
    /// Driving keypoints for `--mask-mode keypoints`.
    #[arg(long)]
    pub drv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub bg_weight: f64,
    #[arg(long, default_value_t = 0.05)]
    pub global_weight: f64,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Write the masks actually used as a 16-bit PGM stack.
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TpsArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub drv: PathBuf,
    /// Smoothing; 0 interpolates the controls exactly.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Residual and distortion summary JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-set tessellation, `NXxNY`.
    #[arg(long, default_value = "4x4", value_parser = parse_dims)]
    pub local: [usize; 2],
    /// Global tessellation, `NXxNY`.
    #[arg(long, default_value = "6x6", value_parser = parse_dims)]
    pub global: [usize; 2],
    #[arg(long, default_value_t = 10)]
    pub sets: usize,
    #[arg(long, default_value_t = 5)]
    pub points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Largest speed of the ground-truth field.
    #[arg(long, default_value_t = 0.3)]
    pub speed: f64,
    /// Evaluation grid, `HxW`.
    #[arg(long, default_value = "64x64", value_parser = parse_dims)]
    pub grid: [usize; 2],
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Compare on these keypoints instead of generating them (with `--drv`).
    #[arg(long, requires = "drv")]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub drv: Option<PathBuf>,
    /// Ground truth for recovery metrics when using `--src`/`--drv`.
    #[arg(long, requires = "src")]
    pub theta_star: Option<PathBuf>,
    /// Report JSON.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write the generated keypoints and θ* into this directory.
    #[arg(long)]
    pub fixture_dir: Option<PathBuf>,
}

pub fn parse_dims(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got '{s}'"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    Ok([parse(a)?, parse(b)?])
}
