//! Simulated execution with replanning, and the seeded benchmark harness.
//!
//! An episode renders a scripted scene, plans on it, and executes the plan
//! by moving the (attached) part by the planned camera-frame motion. If the
//! part ends up outside the goal tolerance the scene is re-rendered from
//! the reached state, with the remaining displacement spread evenly over
//! `N` steps, and the pipeline runs again, up to `max_replans` times.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{plan, FutureFrames, GraspConfig, PlanConfig, PlanError, Tracker, Trajectory};
use crate::exec;
use crate::geometry::RigidTransform;
use crate::rng;
use crate::sceneflow::{BlockMatchConfig, TrackSet};
use crate::simulator::{generate_scene, random_scene, GroundTruth, SceneParams, SimError, SyntheticScene};
use crate::solver::SolveOptions;

/// Tracker used inside simulated episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeTracker {
    Oracle,
    /// Oracle tracks with Gaussian pixel noise of this std-dev.
    NoisyOracle { sigma: f64 },
    BlockMatch(BlockMatchConfig),
    /// Every point stays at its frame-0 pixel: the plan never moves the
    /// part, so the episode can only end by exhausting its replans.
    Corrupted,
}

impl EpisodeTracker {
    fn tracker(&self, gt: &GroundTruth, seed: u64) -> Tracker {
        match self {
            EpisodeTracker::Oracle => Tracker::Oracle(gt.tracks.clone()),
            EpisodeTracker::NoisyOracle { sigma } => {
                Tracker::External(gt.tracks.with_pixel_noise(*sigma, &mut rng::seeded(seed)))
            }
            EpisodeTracker::BlockMatch(cfg) => Tracker::BlockMatch(*cfg),
            EpisodeTracker::Corrupted => Tracker::External(frozen(&gt.tracks)),
        }
    }
}

fn frozen(tracks: &TrackSet) -> TrackSet {
    let (m, f) = (tracks.num_points(), tracks.num_frames());
    let mut pos = Vec::with_capacity(m * f);
    let mut depth = Vec::with_capacity(m * f);
    for i in 0..m {
        for _ in 0..f {
            pos.push(tracks.position(i, 0));
            depth.push(tracks.depth_hint(i, 0).unwrap_or(0.0));
        }
    }
    let out = TrackSet::new(m, f, pos, vec![true; m * f]).expect("same shape");
    if tracks.has_depth_hints() {
        out.with_depth(depth).expect("same shape")
    } else {
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub tracker: EpisodeTracker,
    pub max_replans: usize,
    /// Goal tolerance on the part centroid, meters.
    pub translation_tolerance: f64,
    /// Goal tolerance on part orientation, radians.
    pub rotation_tolerance: f64,
    pub solve: SolveOptions,
    pub grasp: GraspConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            tracker: EpisodeTracker::Oracle,
            max_replans: 10,
            translation_tolerance: 0.005,
            rotation_tolerance: 2f64.to_radians(),
            solve: SolveOptions::default(),
            grasp: GraspConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub success: bool,
    pub replans_used: usize,
    /// Centroid distance between reached and goal part placement, meters.
    pub translation_error: f64,
    pub rotation_error: f64,
    /// Ground truth of the initial rendering.
    pub ground_truth: GroundTruth,
    /// One entry per attempt.
    pub attempts: Vec<Result<Trajectory, PlanError>>,
}

impl EpisodeResult {
    pub fn first_trajectory(&self) -> Option<&Trajectory> {
        self.attempts.first().and_then(|a| a.as_ref().ok())
    }
}

/// Run one closed-loop episode on `scene`. Planning failures count as
/// attempts that leave the part where it is. Fails only if the initial
/// scene cannot be rendered.
pub fn run_episode(scene: &SyntheticScene, cfg: &EpisodeConfig) -> Result<EpisodeResult, SimError> {
    let (frames, gt) = generate_scene(scene)?;
    let goal = gt.goal_pose;
    let centroid = gt.cloud0.centroid();
    let n = gt.num_steps().max(1);
    let error_of = |reached: &RigidTransform| {
        let t = (reached.apply(&centroid) - goal.apply(&centroid)).norm();
        (t, reached.rotation_distance(&goal))
    };

    let mut reached = RigidTransform::identity();
    let mut attempts = Vec::new();
    let mut retained: Option<RigidTransform> = None;
    let mut current: Option<(Vec<_>, GroundTruth)> = Some((frames, gt.clone()));
    let mut replans = 0;
    loop {
        let attempt = attempts.len() as u64;
        let outcome = match current.take() {
            Some((frames, g)) => {
                let mut pc = PlanConfig::new(scene.intrinsics);
                pc.extrinsic = scene.camera_pose;
                pc.solve = cfg.solve;
                pc.grasp = cfg.grasp.clone();
                pc.retained_grasp = retained;
                pc.mask_source = "ground-truth".into();
                let tracker = cfg.tracker.tracker(&g, rng::derive_seed(scene.seed, 0x7a00 + attempt));
                plan(&frames[0], &g.masks[0], FutureFrames::Provided(frames[1..].to_vec()), &tracker, &pc)
            }
            None => Err(PlanError {
                stage: super::Stage::Input,
                kind: super::PlanErrorKind::Other("reached state could not be rendered".into()),
            }),
        };
        if let Ok(out) = &outcome {
            reached = out.camera_motion().compose(&reached);
            retained = out.trajectory.poses.last().copied();
        }
        attempts.push(outcome.map(|o| o.trajectory));

        let (te, re) = error_of(&reached);
        let done = te < cfg.translation_tolerance && re < cfg.rotation_tolerance;
        if done || replans >= cfg.max_replans {
            return Ok(EpisodeResult {
                success: done,
                replans_used: replans,
                translation_error: te,
                rotation_error: re,
                ground_truth: gt,
                attempts,
            });
        }
        replans += 1;
        let remaining = goal.compose(&reached.inverse()).fractional(n);
        let next = scene.with_part_moved(&reached).with_motion(vec![remaining; n]);
        current = generate_scene(&next).ok();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub episodes: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub episode: EpisodeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 0, scene: SceneParams::default(), episode: EpisodeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub replans: usize,
    pub translation_error_m: f64,
    pub rotation_error_rad: f64,
}

/// Run `cfg.episodes` seeded episodes in parallel. Episode `i` uses scene
/// seed `derive_seed(cfg.seed, i)`; rows come back in episode order.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Vec<BenchmarkRow> {
    exec::map_indexed(cfg.episodes, |i| {
        let seed = rng::derive_seed(cfg.seed, i as u64);
        let scene = random_scene(seed, &cfg.scene);
        match run_episode(&scene, &cfg.episode) {
            Ok(r) => BenchmarkRow {
                episode: i,
                seed,
                success: r.success,
                replans: r.replans_used,
                translation_error_m: r.translation_error,
                rotation_error_rad: r.rotation_error,
            },
            Err(e) => {
                log::warn!("episode {i} (seed {seed}) could not be rendered: {e}");
                BenchmarkRow {
                    episode: i,
                    seed,
                    success: false,
                    replans: 0,
                    translation_error_m: f64::NAN,
                    rotation_error_rad: f64::NAN,
                }
            }
        }
    })
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("episode,seed,success,replans,translation_error_m,rotation_error_rad\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e}",
            r.episode, r.seed, r.success as u8, r.replans, r.translation_error_m, r.rotation_error_rad
        );
    }
    s
}
