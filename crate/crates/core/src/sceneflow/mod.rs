//! 2D point tracks and the 3D scene flow of the object part.
//!
//! Flow column `n` (1-based step) holds the displacement of each part point
//! between frames `n−1` and `n`. A displacement is valid only when the
//! point is visible with usable depth at both ends of the step.

mod blockmatch;

pub use blockmatch::{block_match_tracks, BlockMatchConfig};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec;
use crate::geometry::{unproject_pixel, CameraIntrinsics, GeometryError, RgbdFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("expected {expected} frames, got {got}")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no step has at least 3 valid flow vectors")]
    AllInvalid,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel trajectories of `M` part points over `N+1` frames.
///
/// Optional per-observation depth hints let an exact tracker (the simulator
/// oracle) supply the metric depth it already knows; when absent, depth is
/// read from the frames at the nearest pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    num_points: usize,
    num_frames: usize,
    positions: Vec<[f64; 2]>,
    visible: Vec<bool>,
    depth: Option<Vec<f64>>,
}

impl TrackSet {
    pub fn new(
        num_points: usize,
        num_frames: usize,
        positions: Vec<[f64; 2]>,
        visible: Vec<bool>,
    ) -> Result<Self, FlowError> {
        let n = num_points * num_frames;
        if positions.len() != n || visible.len() != n {
            return Err(FlowError::ShapeMismatch(format!(
                "track set {num_points}x{num_frames} needs {n} entries, got {} positions and {} flags",
                positions.len(),
                visible.len()
            )));
        }
        if num_frames == 0 {
            return Err(FlowError::ShapeMismatch("track set needs at least one frame".into()));
        }
        if let Some(i) = (0..n).find(|&i| visible[i] && !(positions[i][0].is_finite() && positions[i][1].is_finite())) {
            return Err(FlowError::ShapeMismatch(format!("non-finite visible position at entry {i}")));
        }
        Ok(Self { num_points, num_frames, positions, visible, depth: None })
    }

    /// Attach per-observation depth hints (same layout as positions).
    pub fn with_depth(mut self, depth: Vec<f64>) -> Result<Self, FlowError> {
        if depth.len() != self.positions.len() {
            return Err(FlowError::ShapeMismatch(format!(
                "depth hints have {} entries, expected {}",
                depth.len(),
                self.positions.len()
            )));
        }
        self.depth = Some(depth);
        Ok(self)
    }

    pub fn without_depth(mut self) -> Self {
        self.depth = None;
        self
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    /// `N + 1`.
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    #[inline]
    fn idx(&self, point: usize, frame: usize) -> usize {
        point * self.num_frames + frame
    }

    pub fn position(&self, point: usize, frame: usize) -> [f64; 2] {
        self.positions[self.idx(point, frame)]
    }

    pub fn is_visible(&self, point: usize, frame: usize) -> bool {
        self.visible[self.idx(point, frame)]
    }

    pub fn depth_hint(&self, point: usize, frame: usize) -> Option<f64> {
        self.depth.as_ref().map(|d| d[self.idx(point, frame)])
    }

    pub fn has_depth_hints(&self) -> bool {
        self.depth.is_some()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visible
    }

    pub fn depth_hints(&self) -> Option<&[f64]> {
        self.depth.as_deref()
    }

    pub fn set_visible(&mut self, point: usize, frame: usize, visible: bool) {
        let i = self.idx(point, frame);
        self.visible[i] = visible;
    }

    pub fn visible_count(&self, frame: usize) -> usize {
        (0..self.num_points).filter(|&i| self.is_visible(i, frame)).count()
    }

    /// Gaussian pixel noise on every position after frame 0. Depth hints
    /// describe the un-noised positions, so they are dropped.
    pub fn with_pixel_noise<R: Rng>(&self, sigma: f64, rng: &mut R) -> Self {
        let mut out = self.clone().without_depth();
        for i in 0..self.num_points {
            for n in 1..self.num_frames {
                let k = self.idx(i, n);
                let du: f64 = rng.sample(StandardNormal);
                let dv: f64 = rng.sample(StandardNormal);
                out.positions[k][0] += sigma * du;
                out.positions[k][1] += sigma * dv;
            }
        }
        out
    }
}

/// Per-point, per-step displacements (`M × 3 × N`) with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowField {
    num_points: usize,
    num_steps: usize,
    displacements: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl SceneFlowField {
    pub fn new(
        num_points: usize,
        num_steps: usize,
        mut displacements: Vec<Vector3<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, FlowError> {
        let n = num_points * num_steps;
        if displacements.len() != n || valid.len() != n {
            return Err(FlowError::ShapeMismatch(format!(
                "flow {num_points}x{num_steps} needs {n} entries, got {} and {}",
                displacements.len(),
                valid.len()
            )));
        }
        for i in 0..n {
            if valid[i] {
                if !displacements[i].iter().all(|x| x.is_finite()) {
                    return Err(FlowError::ShapeMismatch(format!("non-finite valid displacement at {i}")));
                }
            } else {
                displacements[i] = Vector3::zeros();
            }
        }
        Ok(Self { num_points, num_steps, displacements, valid })
    }

    pub fn zeros(num_points: usize, num_steps: usize) -> Self {
        let n = num_points * num_steps;
        Self { num_points, num_steps, displacements: vec![Vector3::zeros(); n], valid: vec![true; n] }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    /// `N`.
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    #[inline]
    fn idx(&self, point: usize, step: usize) -> usize {
        debug_assert!(step >= 1 && step <= self.num_steps);
        point * self.num_steps + (step - 1)
    }

    /// Displacement of `point` over step `step ∈ [1, N]`.
    pub fn displacement(&self, point: usize, step: usize) -> Vector3<f64> {
        self.displacements[self.idx(point, step)]
    }

    pub fn is_valid(&self, point: usize, step: usize) -> bool {
        self.valid[self.idx(point, step)]
    }

    pub fn step_displacements(&self, step: usize) -> Vec<Vector3<f64>> {
        (0..self.num_points).map(|i| self.displacement(i, step)).collect()
    }

    pub fn step_validity(&self, step: usize) -> Vec<bool> {
        (0..self.num_points).map(|i| self.is_valid(i, step)).collect()
    }

    pub fn valid_count(&self, step: usize) -> usize {
        (0..self.num_points).filter(|&i| self.is_valid(i, step)).count()
    }

    /// Rows `(dx, dy, dz, 0)` for one step.
    pub fn homogeneous_step(&self, step: usize) -> Vec<[f64; 4]> {
        (0..self.num_points)
            .map(|i| {
                let d = self.displacement(i, step);
                [d.x, d.y, d.z, 0.0]
            })
            .collect()
    }

    pub fn displacements(&self) -> &[Vector3<f64>] {
        &self.displacements
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn set_invalid(&mut self, point: usize, step: usize) {
        let i = self.idx(point, step);
        self.valid[i] = false;
        self.displacements[i] = Vector3::zeros();
    }
}

/// Lift one track observation to 3D, or `None` if it is not usable.
pub fn lift_observation(
    tracks: &TrackSet,
    frame: &RgbdFrame,
    k: &CameraIntrinsics,
    point: usize,
    n: usize,
) -> Option<Vector3<f64>> {
    if !tracks.is_visible(point, n) {
        return None;
    }
    let [u, v] = tracks.position(point, n);
    let depth = match tracks.depth_hint(point, n) {
        Some(d) => (d > 0.0 && d.is_finite()).then_some(d)?,
        None => frame.depth_nearest(u, v)?,
    };
    Some(unproject_pixel(u, v, depth, k))
}

/// Turn 2D tracks plus per-frame depth into the part's 3D scene flow.
pub fn build_scene_flow(
    tracks: &TrackSet,
    frames: &[RgbdFrame],
    k: &CameraIntrinsics,
) -> Result<SceneFlowField, FlowError> {
    if frames.len() != tracks.num_frames() {
        return Err(FlowError::FrameCountMismatch { expected: tracks.num_frames(), got: frames.len() });
    }
    if frames.len() < 2 {
        return Err(FlowError::FrameCountMismatch { expected: 2, got: frames.len() });
    }
    for f in frames {
        f.check_matches(k)?;
    }
    let steps = frames.len() - 1;
    let per_point = exec::map_indexed(tracks.num_points(), |i| {
        let lifted: Vec<Option<Vector3<f64>>> =
            (0..frames.len()).map(|n| lift_observation(tracks, &frames[n], k, i, n)).collect();
        (1..=steps)
            .map(|s| match (lifted[s - 1], lifted[s]) {
                (Some(a), Some(b)) => (b - a, true),
                _ => (Vector3::zeros(), false),
            })
            .collect::<Vec<_>>()
    });
    let mut displacements = Vec::with_capacity(tracks.num_points() * steps);
    let mut valid = Vec::with_capacity(tracks.num_points() * steps);
    for row in per_point {
        for (d, ok) in row {
            displacements.push(d);
            valid.push(ok);
        }
    }
    let flow = SceneFlowField::new(tracks.num_points(), steps, displacements, valid)?;
    if (1..=steps).all(|s| flow.valid_count(s) < 3) {
        return Err(FlowError::AllInvalid);
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn flat_frame(depth: f32) -> RgbdFrame {
        let n = 32 * 24;
        RgbdFrame::new(32, 24, vec![[0.5; 3]; n], vec![depth; n], vec![true; n]).unwrap()
    }

    fn static_tracks(m: usize, frames: usize) -> TrackSet {
        let mut pos = Vec::new();
        for i in 0..m {
            for _ in 0..frames {
                pos.push([2.0 + i as f64, 3.0 + (i % 5) as f64]);
            }
        }
        TrackSet::new(m, frames, pos, vec![true; m * frames]).unwrap()
    }

    #[test]
    fn static_tracks_constant_depth_give_zero_flow() {
        let frames = vec![flat_frame(1.2); 4];
        let flow = build_scene_flow(&static_tracks(10, 4), &frames, &k()).unwrap();
        assert_eq!(flow.num_steps(), 3);
        assert!(flow.displacements().iter().all(|d| *d == Vector3::zeros()));
        assert!(flow.validity().iter().all(|&v| v));
    }

    #[test]
    fn depth_change_moves_points_along_rays() {
        let frames = vec![flat_frame(1.0), flat_frame(1.5)];
        let flow = build_scene_flow(&static_tracks(4, 2), &frames, &k()).unwrap();
        for i in 0..4 {
            let d = flow.displacement(i, 1);
            assert!((d.z - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn invisible_or_out_of_frame_points_drop_only_that_step() {
        let frames = vec![flat_frame(1.0); 4];
        let mut t = static_tracks(5, 4);
        t.set_visible(2, 1, false);
        let flow = build_scene_flow(&t, &frames, &k()).unwrap();
        assert!(!flow.is_valid(2, 1));
        assert!(!flow.is_valid(2, 2));
        assert!(flow.is_valid(2, 3));
        assert_eq!(flow.displacement(2, 1), Vector3::zeros());
    }

    #[test]
    fn all_invalid_is_an_error() {
        let frames = vec![flat_frame(1.0); 3];
        let mut t = static_tracks(2, 3);
        assert_eq!(build_scene_flow(&t, &frames, &k()), Err(FlowError::AllInvalid));
        t = static_tracks(6, 3);
        for i in 0..6 {
            t.set_visible(i, 1, false);
        }
        assert_eq!(build_scene_flow(&t, &frames, &k()), Err(FlowError::AllInvalid));
    }

    #[test]
    fn frame_count_checked() {
        let frames = vec![flat_frame(1.0); 3];
        assert!(matches!(
            build_scene_flow(&static_tracks(4, 4), &frames, &k()),
            Err(FlowError::FrameCountMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn depth_hints_take_precedence() {
        let frames = vec![flat_frame(1.0), flat_frame(1.0)];
        let t = static_tracks(3, 2).with_depth(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let flow = build_scene_flow(&t, &frames, &k()).unwrap();
        assert!((flow.displacement(0, 1).z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_flow_appends_zero() {
        let f = SceneFlowField::new(1, 1, vec![Vector3::new(1.0, 2.0, 3.0)], vec![true]).unwrap();
        assert_eq!(f.homogeneous_step(1), vec![[1.0, 2.0, 3.0, 0.0]]);
    }

    #[test]
    fn invalid_entries_are_zero_filled() {
        let f = SceneFlowField::new(2, 1, vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(f64::NAN, 0.0, 0.0)], vec![true, false])
            .unwrap();
        assert_eq!(f.displacement(1, 1), Vector3::zeros());
    }
}
