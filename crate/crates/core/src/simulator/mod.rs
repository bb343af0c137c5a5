//! Procedural RGBD sequences of a rigid part moving under scripted motion,
//! with exact ground truth for every downstream stage.
//!
//! Scene geometry and the motion script live in the camera frame of
//! frame 0. `camera_pose` maps camera to world; ground-truth transforms are
//! reported in both frames. Transforming the whole world (camera included)
//! by `Q` therefore leaves the rendered images bit-identical while every
//! world-frame quantity moves by `Q`.

mod random;
pub(crate) mod raster;

pub use random::{random_scene, MotionStyle, SceneParams, TASK_NAMES};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project, unproject, unproject_pixel, CameraIntrinsics, GeometryError, PartMask, PointCloud, RgbdFrame,
    RigidTransform,
};
use crate::rng;
use crate::sceneflow::{SceneFlowField, TrackSet};
use raster::{face_normal, rasterize, ray_box_entry, SurfaceId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("part is not visible in frame 0")]
    DegenerateScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    /// Flat color.
    Uniform([f32; 3]),
    /// Random-colored squares of side `cell` meters.
    Checker { cell: f64, seed: u64 },
}

/// Box with half extents `half_extents`, placed by `pose` (box → camera).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub pose: RigidTransform,
    pub half_extents: Vector3<f64>,
    pub texture: Texture,
}

impl BoxPrimitive {
    pub fn new(pose: RigidTransform, half_extents: Vector3<f64>, texture: Texture) -> Self {
        Self { pose, half_extents, texture }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub part: Vec<BoxPrimitive>,
    pub distractors: Vec<BoxPrimitive>,
    /// Frame-to-frame part motion in the camera frame: `C_n = T_n ∘ C_{n−1}`.
    pub motion: Vec<RigidTransform>,
    pub intrinsics: CameraIntrinsics,
    /// Camera → world.
    pub camera_pose: RigidTransform,
    /// Seeds the sensor noise.
    pub seed: u64,
    /// Std-dev of additive depth noise, meters.
    pub depth_noise: f64,
    /// Std-dev of additive color noise.
    pub rgb_noise: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), SimError> {
        self.intrinsics.validate()?;
        if self.part.is_empty() {
            return Err(SimError::InvalidScene("part geometry is empty".into()));
        }
        if self.distractors.is_empty() {
            return Err(SimError::InvalidScene("distractor geometry is empty".into()));
        }
        for b in self.part.iter().chain(&self.distractors) {
            if !b.half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) {
                return Err(SimError::InvalidScene(format!("bad half extents {:?}", b.half_extents)));
            }
        }
        if self.depth_noise < 0.0 || self.rgb_noise < 0.0 {
            return Err(SimError::InvalidScene("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.motion.len()
    }

    /// Cumulative camera-frame part poses `C_0 = I, C_1, …, C_N`.
    pub fn cumulative_motion(&self) -> Vec<RigidTransform> {
        let mut out = vec![RigidTransform::identity()];
        for t in &self.motion {
            let last = *out.last().unwrap();
            out.push(t.compose(&last));
        }
        out
    }

    /// The same scene with the world (camera included) moved by `q`.
    pub fn transformed(&self, q: &RigidTransform) -> Self {
        Self { camera_pose: q.compose(&self.camera_pose), ..self.clone() }
    }

    /// The part moved rigidly by the camera-frame transform `c`.
    pub fn with_part_moved(&self, c: &RigidTransform) -> Self {
        let mut s = self.clone();
        for b in &mut s.part {
            b.pose = c.compose(&b.pose);
        }
        s
    }

    pub fn with_motion(&self, motion: Vec<RigidTransform>) -> Self {
        Self { motion, ..self.clone() }
    }

    fn placed(&self, part_pose: &RigidTransform) -> Vec<(&BoxPrimitive, RigidTransform)> {
        self.part
            .iter()
            .map(|b| (b, part_pose.compose(&b.pose)))
            .chain(self.distractors.iter().map(|b| (b, b.pose)))
            .collect()
    }

    /// Render one frame with the part at camera-frame pose `part_pose`.
    /// Returns the frame and the part mask.
    pub fn render(&self, part_pose: &RigidTransform, frame_index: usize) -> (RgbdFrame, PartMask) {
        let k = &self.intrinsics;
        let raster = rasterize(k, &self.placed(part_pose));
        let n_part = self.part.len() as u32;
        let mut noise = rng::seeded(rng::derive_seed(self.seed, frame_index as u64));
        let mut frame = RgbdFrame::blank(k.width, k.height);
        let mut mask = vec![false; k.pixel_count()];
        for i in 0..k.pixel_count() {
            if let Some(SurfaceId { primitive, .. }) = raster.ids[i] {
                let mut d = raster.depth[i];
                if self.depth_noise > 0.0 {
                    d += self.depth_noise * noise.sample::<f64, _>(StandardNormal);
                }
                let mut c = raster.rgb[i];
                if self.rgb_noise > 0.0 {
                    for ch in &mut c {
                        *ch = (*ch + (self.rgb_noise * noise.sample::<f64, _>(StandardNormal)) as f32).clamp(0.0, 1.0);
                    }
                }
                frame.rgb[i] = c;
                if d > 0.0 {
                    frame.depth[i] = d as f32;
                    frame.valid[i] = true;
                }
                mask[i] = primitive < n_part;
            }
        }
        (frame, PartMask::new(k.width, k.height, mask).expect("mask shape"))
    }

    /// Whether the segment from the camera to `p` (camera frame, part at
    /// `part_pose`) is blocked before reaching `p`.
    fn occluded(&self, p: &Vector3<f64>, part_pose: &RigidTransform) -> bool {
        let dist = p.norm();
        let dir = p / dist;
        self.placed(part_pose)
            .iter()
            .any(|(b, pose)| ray_box_entry(b, pose, &dir).is_some_and(|t| t < dist * (1.0 - 1e-6)))
    }
}

/// Exact answers for one generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub intrinsics: CameraIntrinsics,
    pub camera_pose: RigidTransform,
    /// Part mask in every frame `0..=N`.
    pub masks: Vec<PartMask>,
    /// Frame-0 part cloud (camera frame) from lifting `masks[0]`.
    pub cloud0: PointCloud,
    /// Oracle tracks of `cloud0`, with exact depth hints.
    pub tracks: TrackSet,
    /// Camera-frame scene flow implied by the tracks.
    pub flow: SceneFlowField,
    /// Camera-frame per-step transforms `T_1..T_N`.
    pub transforms: Vec<RigidTransform>,
    /// Camera-frame part displacement from frame 0 to frame N.
    pub goal_pose: RigidTransform,
}

impl GroundTruth {
    pub fn num_steps(&self) -> usize {
        self.transforms.len()
    }

    pub fn world_transforms(&self) -> Vec<RigidTransform> {
        self.transforms.iter().map(|t| t.conjugated_by(&self.camera_pose)).collect()
    }

    pub fn world_goal_pose(&self) -> RigidTransform {
        self.goal_pose.conjugated_by(&self.camera_pose)
    }

    /// Pixel positions and visibility of the frame-0 part points at frame `n`.
    pub fn oracle_tracks(&self, n: usize) -> (Vec<[f64; 2]>, Vec<bool>) {
        let m = self.tracks.num_points();
        ((0..m).map(|i| self.tracks.position(i, n)).collect(), (0..m).map(|i| self.tracks.is_visible(i, n)).collect())
    }
}

/// Render the scripted sequence and derive its ground truth.
pub fn generate_scene(scene: &SyntheticScene) -> Result<(Vec<RgbdFrame>, GroundTruth), SimError> {
    scene.validate()?;
    let k = scene.intrinsics;
    let poses = scene.cumulative_motion();
    let mut frames = Vec::with_capacity(poses.len());
    let mut masks = Vec::with_capacity(poses.len());
    for (n, pose) in poses.iter().enumerate() {
        let (f, m) = scene.render(pose, n);
        frames.push(f);
        masks.push(m);
    }
    if masks[0].pixel_count() == 0 {
        return Err(SimError::DegenerateScene);
    }
    let cloud0 = unproject(&frames[0], &masks[0], &k).map_err(|_| SimError::DegenerateScene)?;

    // Face each frame-0 point lies on, for back-face visibility.
    let raster0 = rasterize(&k, &scene.placed(&poses[0]));
    let normals0: Vec<Vector3<f64>> = cloud0
        .source_pixels()
        .iter()
        .map(|&[u, v]| {
            let id = raster0.ids[v as usize * k.width as usize + u as usize].expect("masked pixel has a surface");
            let prim = &scene.part[id.primitive as usize];
            prim.pose.apply_vector(&face_normal(id.face))
        })
        .collect();

    let m = cloud0.len();
    let frames_n = poses.len();
    let mut positions = vec![[0.0; 2]; m * frames_n];
    let mut visible = vec![false; m * frames_n];
    let mut depth = vec![0.0; m * frames_n];
    for (i, p0) in cloud0.points().iter().enumerate() {
        for (n, pose) in poses.iter().enumerate() {
            let idx = i * frames_n + n;
            let q = pose.apply(p0);
            let Ok((u, v, z)) = project(&q, &k) else { continue };
            positions[idx] = [u, v];
            depth[idx] = z;
            if n == 0 {
                visible[idx] = true;
                positions[idx] = [cloud0.source_pixels()[i][0] as f64, cloud0.source_pixels()[i][1] as f64];
                depth[idx] = p0.z;
                continue;
            }
            let in_frame = u >= -0.5 && v >= -0.5 && u < k.width as f64 - 0.5 && v < k.height as f64 - 0.5;
            let facing = pose.apply_vector(&normals0[i]).dot(&q) < 0.0;
            visible[idx] = in_frame && facing && z > raster::NEAR_PLANE && !scene.occluded(&q, pose);
        }
    }
    let tracks = TrackSet::new(m, frames_n, positions, visible)
        .and_then(|t| t.with_depth(depth))
        .map_err(|e| SimError::InvalidScene(e.to_string()))?;

    // Same lifting arithmetic as `build_scene_flow` with depth hints.
    let steps = frames_n - 1;
    let mut disp = Vec::with_capacity(m * steps);
    let mut valid = Vec::with_capacity(m * steps);
    for i in 0..m {
        let lift = |n: usize| {
            let [u, v] = tracks.position(i, n);
            unproject_pixel(u, v, tracks.depth_hint(i, n).unwrap(), &k)
        };
        for s in 1..=steps {
            let ok = tracks.is_visible(i, s - 1) && tracks.is_visible(i, s);
            disp.push(if ok { lift(s) - lift(s - 1) } else { Vector3::zeros() });
            valid.push(ok);
        }
    }
    let flow = SceneFlowField::new(m, steps, disp, valid).map_err(|e| SimError::InvalidScene(e.to_string()))?;

    let gt = GroundTruth {
        intrinsics: k,
        camera_pose: scene.camera_pose,
        masks,
        cloud0,
        tracks,
        flow,
        transforms: scene.motion.clone(),
        goal_pose: *poses.last().unwrap(),
    };
    Ok((frames, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sceneflow::build_scene_flow;
    use crate::solver::{solve_transform_sequence, SolveOptions};

    fn scene(seed: u64, steps: usize) -> SyntheticScene {
        random_scene(seed, &SceneParams { num_steps: steps, ..Default::default() })
    }

    #[test]
    fn static_script_gives_zero_flow() {
        let s = scene(1, 4).with_motion(vec![RigidTransform::identity(); 4]);
        let (frames, gt) = generate_scene(&s).unwrap();
        assert_eq!(frames.len(), 5);
        assert!(gt.flow.displacements().iter().all(|d| d.norm() < 1e-15));
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn pure_translation_flow() {
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -0.01));
        let s = scene(2, 5).with_motion(vec![t; 5]);
        let (_, gt) = generate_scene(&s).unwrap();
        let mut checked = 0;
        for i in 0..gt.flow.num_points() {
            for n in 1..=5 {
                if gt.flow.is_valid(i, n) {
                    assert!((gt.flow.displacement(i, n) - Vector3::new(0.0, 0.0, -0.01)).norm() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = SyntheticScene { rgb_noise: 0.05, depth_noise: 0.001, ..scene(42, 3) };
        let (a, _) = generate_scene(&s).unwrap();
        let (b, _) = generate_scene(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_lifts_to_ground_truth_cloud() {
        let s = scene(3, 3);
        let (frames, gt) = generate_scene(&s).unwrap();
        assert_eq!(unproject(&frames[0], &gt.masks[0], &s.intrinsics).unwrap(), gt.cloud0);
    }

    #[test]
    fn frame_zero_tracks_are_source_pixels() {
        let (_, gt) = generate_scene(&scene(4, 3)).unwrap();
        let (pos, vis) = gt.oracle_tracks(0);
        assert!(vis.iter().all(|&v| v));
        for (p, s) in pos.iter().zip(gt.cloud0.source_pixels()) {
            assert_eq!(*p, [s[0] as f64, s[1] as f64]);
        }
    }

    #[test]
    fn approaching_camera_spreads_tracks_radially() {
        let toward = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -0.05));
        let s = scene(5, 2).with_motion(vec![toward; 2]);
        let (_, gt) = generate_scene(&s).unwrap();
        let k = s.intrinsics;
        for i in 0..gt.tracks.num_points() {
            let r = |n: usize| {
                let [u, v] = gt.tracks.position(i, n);
                ((u - k.cx).powi(2) + (v - k.cy).powi(2)).sqrt()
            };
            if r(0) > 1.0 {
                assert!(r(1) > r(0) && r(2) > r(1));
            }
        }
    }

    #[test]
    fn occluded_points_are_invisible() {
        let base = scene(6, 1);
        let c = *base.part[0].pose.translation();
        // Slide the part sideways behind a panel that does not cover it at frame 0.
        let shift = Vector3::new(0.25, 0.0, 0.0);
        let mut s = base.with_motion(vec![RigidTransform::from_translation(shift)]);
        s.distractors.push(BoxPrimitive::new(
            RigidTransform::from_translation((c + shift) * 0.6),
            Vector3::new(0.07, 0.07, 0.005),
            Texture::Uniform([0.2, 0.2, 0.2]),
        ));
        let (_, gt) = generate_scene(&s).unwrap();
        let (_, vis) = gt.oracle_tracks(1);
        assert!(vis.iter().all(|&v| !v));
        assert_eq!(gt.masks[1].pixel_count(), 0);
    }

    #[test]
    fn closed_loop_recovers_script() {
        for seed in 0..5 {
            let s = scene(100 + seed, 6);
            let (_, gt) = generate_scene(&s).unwrap();
            let fits = solve_transform_sequence(&gt.cloud0, &gt.flow, &SolveOptions::default()).unwrap();
            for (f, t) in fits.iter().zip(&gt.transforms) {
                assert!(f.transform.rotation_distance(t) < 1e-6);
                assert!(f.transform.translation_distance(t) < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_tracks_reproduce_flow_exactly() {
        let s = scene(7, 5);
        let (frames, gt) = generate_scene(&s).unwrap();
        let flow = build_scene_flow(&gt.tracks, &frames, &s.intrinsics).unwrap();
        assert_eq!(flow.validity(), gt.flow.validity());
        for (a, b) in flow.displacements().iter().zip(gt.flow.displacements()) {
            assert!((a - b).abs().max() < 1e-12);
        }
    }

    #[test]
    fn invisible_part_is_degenerate() {
        let mut s = scene(8, 2);
        for b in &mut s.part {
            b.pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -5.0)).compose(&b.pose);
        }
        assert_eq!(generate_scene(&s).unwrap_err(), SimError::DegenerateScene);
    }

    #[test]
    fn world_frame_is_a_relabeling() {
        let s = scene(9, 3);
        let q = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.2, 0.5), Vector3::new(1.0, 2.0, -0.5));
        let (fa, ga) = generate_scene(&s).unwrap();
        let (fb, gb) = generate_scene(&s.transformed(&q)).unwrap();
        assert_eq!(fa, fb);
        for (a, b) in ga.world_transforms().iter().zip(gb.world_transforms()) {
            let expected = a.conjugated_by(&q);
            assert!((expected.to_matrix4() - b.to_matrix4()).abs().max() < 1e-12);
        }
    }
}
