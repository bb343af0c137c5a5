use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "flowplan", version, about = "Object-part scene flow to end-effector trajectories")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic scene with ground-truth sidecars.
    GenScene(GenSceneArgs),
    /// Train the toy video diffusion model on simulator clips.
    TrainDiffusion(TrainArgs),
    /// Sample future frames from a trained model.
    SampleVideo(SampleArgs),
    /// Turn an observation and future frames into an end-effector trajectory.
    Plan(PlanArgs),
    /// Run seeded closed-loop episodes and write a CSV.
    RunBenchmark(BenchmarkArgs),
    /// Convert between RGBDV and per-frame PNG directories.
    Convert(ConvertArgs),
    /// Print the header of a flowplan file as JSON.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScene(_) => "gen-scene",
            Command::TrainDiffusion(_) => "train-diffusion",
            Command::SampleVideo(_) => "sample-video",
            Command::Plan(_) => "plan",
            Command::RunBenchmark(_) => "run-benchmark",
            Command::Convert(_) => "convert",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionArg {
    Random,
    Static,
    SlideRight,
    SlideLeft,
    Lift,
    Twist,
}

#[derive(Debug, Args, Serialize)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub seed: u64,
    /// Output frame stack (`.rgbdv`); sidecars are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 96)]
    pub height: u32,
    #[arg(long, value_enum, default_value_t = MotionArg::Random)]
    pub motion: MotionArg,
    /// Depth noise std-dev, meters.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rgb_noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    /// Output checkpoint (`.dnsr`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// paper-literal or standard.
    #[arg(long, default_value = "paper-literal")]
    pub mode: String,
    /// Number of diffusion steps K.
    #[arg(long, default_value_t = 50)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta_end: f64,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Frame stack whose first frame conditions the sample.
    #[arg(long)]
    pub observation: PathBuf,
    /// Task index or name.
    #[arg(long, default_value = "0")]
    pub task: String,
    /// Override the checkpoint's sampler mode.
    #[arg(long)]
    pub mode: Option<String>,
    /// Output frame stack (`.rgbdv`) of the sampled future frames.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackerArg {
    /// Ground-truth tracks from the `<stem>.gt.json` sidecar of --frames.
    Oracle,
    Blockmatch,
    /// Tracks file given by --tracks.
    External,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Observation followed by the future frames (`.rgbdv`). With --model
    /// only the first frame is used.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, value_enum, default_value_t = TrackerArg::Blockmatch)]
    pub tracker: TrackerArg,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    /// Generate the future frames with this checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// Sampler seed (required with --model).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Camera-to-world pose: JSON array of 16 row-major floats.
    #[arg(long)]
    pub extrinsic: Option<PathBuf>,
    /// RANSAC at every step.
    #[arg(long)]
    pub robust: bool,
    #[arg(long, default_value_t = 0)]
    pub ransac_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub ransac_iterations: usize,
    /// Inlier threshold, meters.
    #[arg(long, default_value_t = 0.01)]
    pub ransac_threshold: f64,
    /// Weight points by 1/z².
    #[arg(long)]
    pub depth_weighting: bool,
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    #[arg(long, default_value_t = 8)]
    pub search_radius: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_zncc: f64,
    #[arg(long)]
    pub subpixel: bool,
    /// Maximum gripper opening, meters.
    #[arg(long, default_value_t = 0.08)]
    pub max_width: f64,
    #[arg(long, default_value_t = 64)]
    pub grasp_count: usize,
    #[arg(long, default_value_t = 0.005)]
    pub voxel: f64,
    /// External grasp candidates (JSON) to filter instead of proposing.
    #[arg(long)]
    pub grasp_candidates: Option<PathBuf>,
    /// Write every intermediate artifact into this directory.
    #[arg(long)]
    pub dump_intermediates: Option<PathBuf>,
    /// Output trajectory JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeTrackerArg {
    Oracle,
    Noisy,
    Blockmatch,
    Corrupted,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EpisodeTrackerArg::Oracle)]
    pub tracker: EpisodeTrackerArg,
    /// Pixel noise std-dev for the noisy tracker.
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long)]
    pub robust: bool,
    #[arg(long, default_value_t = 10)]
    pub max_replans: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 96)]
    pub height: u32,
    /// Goal tolerance on the part centroid, meters.
    #[arg(long, default_value_t = 0.005)]
    pub translation_tolerance: f64,
    /// Goal tolerance on orientation, degrees.
    #[arg(long, default_value_t = 2.0)]
    pub rotation_tolerance_deg: f64,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PngFormat {
    /// 32-bit floats split across two 16-bit images; bit-exact.
    Float,
    /// 8-bit color and millimeter depth; lossy.
    Byte,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertArgs {
    /// An `.rgbdv` file or a PNG directory written by convert.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = PngFormat::Float)]
    pub format: PngFormat,
    /// Required for the lossy byte format.
    #[arg(long)]
    pub allow_lossy: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}
