//! The end-to-end pipeline: mask → future frames → tracks → scene flow →
//! per-step transforms → grasp → end-effector trajectory, plus simulated
//! episodes with replanning and a seeded benchmark harness.
//!
//! Geometry is processed in the camera frame and mapped to the world frame
//! through the extrinsic only at the end, so moving the whole scene (camera
//! included) leaves every intermediate unchanged.

mod episode;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, ModelManifest, NoiseMode, Observation, UNet};
use crate::geometry::{unproject, CameraIntrinsics, GeometryError, PartMask, PointCloud, RgbdFrame, RigidTransform};
use crate::grasp::{self, GraspCandidate, GraspError, GripperModel, ProposalConfig};
use crate::io;
use crate::rng;
use crate::sceneflow::{self, block_match_tracks, BlockMatchConfig, FlowError, SceneFlowField, TrackSet};
use crate::solver::{self, SequenceError, SolveOptions, TransformFitResult};

pub use episode::{
    benchmark_csv, run_benchmark, run_episode, BenchmarkConfig, BenchmarkRow, EpisodeConfig, EpisodeResult,
    EpisodeTracker,
};

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Input,
    Generation,
    Tracking,
    SceneFlow,
    Solver,
    Grasp,
    Trajectory,
    Dump,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Input => "input",
            Stage::Generation => "generation",
            Stage::Tracking => "tracking",
            Stage::SceneFlow => "sceneflow",
            Stage::Solver => "solver",
            Stage::Grasp => "grasp",
            Stage::Trajectory => "trajectory",
            Stage::Dump => "dump",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanErrorKind {
    #[error("need at least 3 part points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Solver(#[from] SequenceError),
    #[error(transparent)]
    Grasp(#[from] GraspError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage}: {kind}")]
pub struct PlanError {
    pub stage: Stage,
    pub kind: PlanErrorKind,
}

impl PlanError {
    fn at(stage: Stage) -> impl Fn(PlanErrorKind) -> PlanError {
        move |kind| PlanError { stage, kind }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PlanError>;
}

impl<T, E: Into<PlanErrorKind>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PlanError> {
        self.map_err(|e| PlanError { stage, kind: e.into() })
    }
}

/// Where the `N` future frames come from.
pub enum FutureFrames<'a> {
    Provided(Vec<RgbdFrame>),
    /// Sampled from the video model, conditioned on the observation.
    Generated { net: &'a UNet, manifest: &'a ModelManifest, task: usize, seed: u64 },
}

/// How the frame-0 part pixels are followed through the future frames.
#[derive(Debug, Clone, PartialEq)]
pub enum Tracker {
    /// Ground-truth tracks from the simulator.
    Oracle(TrackSet),
    /// Tracks from an outside tracker.
    External(TrackSet),
    BlockMatch(BlockMatchConfig),
}

impl Tracker {
    pub fn id(&self) -> &'static str {
        match self {
            Tracker::Oracle(_) => "oracle",
            Tracker::External(_) => "external",
            Tracker::BlockMatch(_) => "blockmatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub max_width: f64,
    pub count: usize,
    pub voxel_size: f64,
    pub proposal: ProposalConfig,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self { max_width: 0.08, count: 64, voxel_size: 0.005, proposal: ProposalConfig::default() }
    }
}

impl GraspConfig {
    pub fn gripper(&self) -> &GripperModel {
        &self.proposal.gripper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub intrinsics: CameraIntrinsics,
    /// Camera → world.
    pub extrinsic: RigidTransform,
    pub solve: SolveOptions,
    pub grasp: GraspConfig,
    /// World-frame candidates from an outside detector; replaces proposals.
    pub candidates: Option<Vec<GraspCandidate>>,
    /// Keep this world-frame grasp instead of detecting one (replanning
    /// while the gripper is still attached).
    pub retained_grasp: Option<RigidTransform>,
    pub mask_source: String,
    pub dump_dir: Option<PathBuf>,
}

impl PlanConfig {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            extrinsic: RigidTransform::identity(),
            solve: SolveOptions::default(),
            grasp: GraspConfig::default(),
            candidates: None,
            retained_grasp: None,
            mask_source: "provided".into(),
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mask_source: String,
    pub tracker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_mode: Option<NoiseMode>,
    pub seeds: BTreeMap<String, u64>,
    /// How `P_0` was picked among the surviving grasp candidates.
    pub grasp_selection: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            mask_source: "unspecified".into(),
            tracker: "unspecified".into(),
            sampler_mode: None,
            seeds: BTreeMap::new(),
            grasp_selection: "given".into(),
        }
    }
}

/// `P_0..P_N` with `P_n = T_n ∘ P_{n−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<RigidTransform>,
    pub transforms: Vec<RigidTransform>,
    pub residuals: Vec<f64>,
    pub provenance: Provenance,
    /// The gripper closes on the part at `P_0`; no other gripper events.
    pub attach_at_start: bool,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.transforms.len()
    }

    /// Bit-exact check of the composition chain.
    pub fn verify(&self) -> bool {
        self.poses.len() == self.transforms.len() + 1
            && self.transforms.iter().enumerate().all(|(i, t)| t.compose(&self.poses[i]) == self.poses[i + 1])
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            poses: self.poses.iter().map(|p| p.to_row_major()).collect(),
            transforms: self.transforms.iter().map(|p| p.to_row_major()).collect(),
            residuals: self.residuals.clone(),
            provenance: self.provenance.clone(),
            attach_at_start: self.attach_at_start,
        }
    }
}

/// Trajectory JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub poses: Vec<[f64; 16]>,
    pub transforms: Vec<[f64; 16]>,
    pub residuals: Vec<f64>,
    pub provenance: Provenance,
    pub attach_at_start: bool,
}

/// Left-compose `transforms` onto `p0`. `residuals` may be empty.
pub fn compose_trajectory(p0: RigidTransform, transforms: &[RigidTransform], residuals: &[f64]) -> Trajectory {
    let mut poses = Vec::with_capacity(transforms.len() + 1);
    poses.push(p0);
    for t in transforms {
        let last = *poses.last().unwrap();
        poses.push(t.compose(&last));
    }
    let residuals = if residuals.len() == transforms.len() { residuals.to_vec() } else { vec![0.0; transforms.len()] };
    let traj =
        Trajectory { poses, transforms: transforms.to_vec(), residuals, provenance: Provenance::default(), attach_at_start: true };
    debug_assert!(traj.verify());
    traj
}

/// Everything `plan` produced, camera-frame intermediates included.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub trajectory: Trajectory,
    /// World-frame grasp `P_0`.
    pub grasp: GraspCandidate,
    pub cloud0: PointCloud,
    pub tracks: TrackSet,
    pub flow: SceneFlowField,
    /// Camera-frame fits.
    pub fits: Vec<TransformFitResult>,
    pub future: Vec<RgbdFrame>,
}

impl PlanOutput {
    /// Net camera-frame part motion `T_N ∘ … ∘ T_1`.
    pub fn camera_motion(&self) -> RigidTransform {
        self.fits.iter().fold(RigidTransform::identity(), |acc, f| f.transform.compose(&acc))
    }
}

fn generate_future(
    observation: &RgbdFrame,
    net: &UNet,
    manifest: &ModelManifest,
    task: usize,
    seed: u64,
) -> Result<Vec<RgbdFrame>, PlanError> {
    let gen = PlanError::at(Stage::Generation);
    let obs = Observation::from_frame(observation, manifest.depth_range);
    let schedule = manifest.schedule.build().map_err(|e| gen(PlanErrorKind::Other(e.to_string())))?;
    let mut r = rng::seeded(seed);
    let video = diffusion::sample_video(net, &obs, task, &schedule, manifest.mode, &mut r)
        .map_err(|e| gen(PlanErrorKind::Other(e.to_string())))?;
    Ok(video.to_frames(manifest.depth_range))
}

/// Run the full pipeline on one observation.
pub fn plan(
    observation: &RgbdFrame,
    mask: &PartMask,
    future: FutureFrames,
    tracker: &Tracker,
    config: &PlanConfig,
) -> Result<PlanOutput, PlanError> {
    let k = &config.intrinsics;
    observation.check_matches(k).at(Stage::Input)?;
    let mut provenance = Provenance {
        mask_source: config.mask_source.clone(),
        tracker: tracker.id().into(),
        ..Default::default()
    };
    if config.solve.robust {
        provenance.seeds.insert("ransac".into(), config.solve.ransac.seed);
    }

    let future = match future {
        FutureFrames::Provided(f) => f,
        FutureFrames::Generated { net, manifest, task, seed } => {
            provenance.sampler_mode = Some(manifest.mode);
            provenance.seeds.insert("sampler".into(), seed);
            generate_future(observation, net, manifest, task, seed)?
        }
    };
    if future.is_empty() {
        return Err(PlanError { stage: Stage::Input, kind: PlanErrorKind::Other("no future frames".into()) });
    }
    let mut frames = Vec::with_capacity(future.len() + 1);
    frames.push(observation.clone());
    frames.extend(future.iter().cloned());

    let cloud = match unproject(observation, mask, k) {
        Ok(c) => c,
        Err(GeometryError::EmptySelection) => {
            return Err(PlanError { stage: Stage::SceneFlow, kind: PlanErrorKind::TooFewPoints(0) })
        }
        Err(e) => return Err(e).at(Stage::Input),
    };
    if cloud.len() < 3 {
        return Err(PlanError { stage: Stage::SceneFlow, kind: PlanErrorKind::TooFewPoints(cloud.len()) });
    }

    let tracks = match tracker {
        Tracker::Oracle(t) | Tracker::External(t) => t.clone(),
        Tracker::BlockMatch(cfg) => block_match_tracks(&frames, mask, cfg).at(Stage::Tracking)?,
    };
    if tracks.num_points() != cloud.len() {
        return Err(PlanError {
            stage: Stage::Tracking,
            kind: PlanErrorKind::Flow(FlowError::ShapeMismatch(format!(
                "{} tracks for {} part points",
                tracks.num_points(),
                cloud.len()
            ))),
        });
    }
    let flow = sceneflow::build_scene_flow(&tracks, &frames, k).at(Stage::SceneFlow)?;

    // Use the tracker's own frame-0 lift as the source where available so
    // the cloud and its flow share one depth reading.
    let points: Vec<Vector3<f64>> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| sceneflow::lift_observation(&tracks, observation, k, i, 0).unwrap_or(*p))
        .collect();
    let cloud0 = PointCloud::with_pixels(points, cloud.source_pixels().to_vec()).at(Stage::SceneFlow)?;

    let fits = solver::solve_transform_sequence(&cloud0, &flow, &config.solve).at(Stage::Solver)?;

    let e = &config.extrinsic;
    let grasp_c = select_grasp(observation, &cloud0, config, &mut provenance)?;
    let grasp_w = grasp_c.transformed(e);

    let world: Vec<RigidTransform> = fits.iter().map(|f| f.transform.conjugated_by(e)).collect();
    let residuals: Vec<f64> = fits.iter().map(|f| f.rms_residual).collect();
    let mut trajectory = compose_trajectory(grasp_w.pose, &world, &residuals);
    trajectory.provenance = provenance;
    if !trajectory.verify() {
        return Err(PlanError {
            stage: Stage::Trajectory,
            kind: PlanErrorKind::Other("composition chain failed re-verification".into()),
        });
    }

    let out = PlanOutput { trajectory, grasp: grasp_w, cloud0, tracks, flow, fits, future };
    if let Some(dir) = &config.dump_dir {
        dump(dir, mask, &frames, &out).map_err(|e| PlanError { stage: Stage::Dump, kind: PlanErrorKind::Other(e.to_string()) })?;
    }
    Ok(out)
}

/// Camera-frame `P_0`: a retained grasp, else the best collision-free
/// candidate (external or proposed).
fn select_grasp(
    observation: &RgbdFrame,
    part: &PointCloud,
    config: &PlanConfig,
    provenance: &mut Provenance,
) -> Result<GraspCandidate, PlanError> {
    let e_inv = config.extrinsic.inverse();
    if let Some(p) = &config.retained_grasp {
        provenance.grasp_selection = "retained".into();
        return Ok(GraspCandidate { pose: e_inv.compose(p), width: config.grasp.max_width, score: 0.0 });
    }
    let g = &config.grasp;
    let candidates = match &config.candidates {
        Some(c) => {
            provenance.grasp_selection = "top-score external candidate passing collision filter".into();
            c.iter().map(|c| c.transformed(&e_inv)).collect()
        }
        None => {
            provenance.grasp_selection = "top-score heuristic candidate passing collision filter".into();
            grasp::propose_grasps_from(part, g.max_width, g.count, &Vector3::zeros(), &g.proposal).at(Stage::Grasp)?
        }
    };
    let full = PartMask::full(observation.width, observation.height);
    let scene = unproject(observation, &full, &config.intrinsics).at(Stage::Grasp)?;
    let grid = grasp::build_occupancy(&scene, g.voxel_size).at(Stage::Grasp)?;
    grasp::filter_collisions(&candidates, &grid, g.gripper(), part).at(Stage::Grasp)
}

fn dump(dir: &std::path::Path, mask: &PartMask, frames: &[RgbdFrame], out: &PlanOutput) -> Result<(), io::FormatError> {
    std::fs::create_dir_all(dir).map_err(|source| io::FormatError::Io { path: dir.to_owned(), source })?;
    io::save_rgbdv(&dir.join("frames.rgbdv"), frames)?;
    io::save_pgm(&dir.join("mask.pgm"), mask)?;
    io::save_tracks(&dir.join("tracks.trks"), &out.tracks)?;
    io::save_flow(&dir.join("flow.sflw"), &out.flow)?;
    io::save_json(&dir.join("transforms.json"), &io::transform_records(&out.fits))?;
    io::save_json(&dir.join("grasp.json"), &[io::CandidateRecord::from(&out.grasp)])?;
    io::save_json(&dir.join("trajectory.json"), &out.trajectory.to_record())
}
