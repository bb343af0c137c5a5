//! Initial grasp pose: PCA proposals on the part cloud, voxel collision filter
//! against the whole scene.
//!
//! Gripper frame: the hand approaches along its −z axis, the fingers close
//! along x, and the origin sits between the fingertips.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::{PointCloud, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("need at least 3 part points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("part is wider than the gripper along every axis")]
    NoFeasibleGrasp,
    #[error("every grasp candidate collides with the scene")]
    AllCollide,
    #[error("no grasp candidates to filter")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub pose: RigidTransform,
    pub width: f64,
    pub score: f64,
}

impl GraspCandidate {
    pub fn closing_axis(&self) -> Vector3<f64> {
        self.pose.rotation().column(0).into_owned()
    }

    /// Direction the hand travels in.
    pub fn approach(&self) -> Vector3<f64> {
        -self.pose.rotation().column(2).into_owned()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self { pose: t.compose(&self.pose), ..*self }
    }
}

/// Parallel-jaw hand as boxes in the gripper frame. Lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    /// Finger size along the closing axis.
    pub finger_thickness: f64,
    /// Finger size across the closing plane (gripper y).
    pub finger_width: f64,
    /// Finger size along the approach axis.
    pub finger_length: f64,
    pub palm_thickness: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        Self { finger_thickness: 0.01, finger_width: 0.02, finger_length: 0.04, palm_thickness: 0.01 }
    }
}

/// Axis-aligned box in gripper coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl GripperModel {
    pub fn validate(&self) -> Result<(), GraspError> {
        let all = [self.finger_thickness, self.finger_width, self.finger_length, self.palm_thickness];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(GraspError::InvalidParameter(format!("gripper dimensions must be positive: {self:?}")))
        }
    }

    /// Two fingers and the palm at the final pose, each extended along +z by
    /// one finger length to cover the approach motion.
    pub fn swept_boxes(&self, width: f64) -> [LocalBox; 3] {
        let (t, w, l) = (self.finger_thickness, self.finger_width, self.finger_length);
        let half = width / 2.0;
        let finger = |x0: f64, x1: f64| LocalBox {
            min: Vector3::new(x0, -w / 2.0, 0.0),
            max: Vector3::new(x1, w / 2.0, 2.0 * l),
        };
        [
            finger(half, half + t),
            finger(-half - t, -half),
            LocalBox {
                min: Vector3::new(-half - t, -w / 2.0, l),
                max: Vector3::new(half + t, w / 2.0, 2.0 * l + self.palm_thickness),
            },
        ]
    }
}

/// Proposal knobs beyond the width limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Extra opening beyond the part extent.
    pub clearance: f64,
    /// Half-angle of the approach cone around the camera ray, radians.
    pub cone_half_angle: f64,
    /// Cone samples on each side of the central ray.
    pub cone_steps: usize,
    pub gripper: GripperModel,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { clearance: 0.01, cone_half_angle: 30f64.to_radians(), cone_steps: 2, gripper: GripperModel::default() }
    }
}

/// Principal frame of a cloud: axes sorted major to minor, canonical signs.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalFrame {
    pub centroid: Vector3<f64>,
    pub axes: [Vector3<f64>; 3],
    pub variances: [f64; 3],
    /// `(min, max)` of the centered projections on each axis.
    pub ranges: [(f64, f64); 3],
}

impl PrincipalFrame {
    pub fn extent(&self, axis: usize) -> f64 {
        self.ranges[axis].1 - self.ranges[axis].0
    }
}

/// PCA with each axis oriented so the third moment along it is positive;
/// symmetric clouds fall back to pointing towards `viewpoint`.
pub fn principal_frame(part: &PointCloud, viewpoint: &Vector3<f64>) -> PrincipalFrame {
    let c = part.centroid();
    let n = part.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in part.points() {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = part.points().iter().map(|p| (p - c).norm()).fold(0.0, f64::max).max(1e-12);
    let to_view = viewpoint - c;
    let mut axes = [Vector3::zeros(); 3];
    let mut variances = [0.0; 3];
    let mut ranges = [(0.0, 0.0); 3];
    for (slot, &k) in order.iter().enumerate() {
        let mut e: Vector3<f64> = eig.eigenvectors.column(k).normalize();
        let skew: f64 = part.points().iter().map(|p| (p - c).dot(&e).powi(3)).sum::<f64>() / n;
        let flip = if skew.abs() > 1e-9 * scale.powi(3) { skew < 0.0 } else { e.dot(&to_view) < 0.0 };
        if flip {
            e = -e;
        }
        let (lo, hi) = part
            .points()
            .iter()
            .map(|p| (p - c).dot(&e))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
        axes[slot] = e;
        variances[slot] = eig.eigenvalues[k].max(0.0);
        ranges[slot] = (lo, hi);
    }
    PrincipalFrame { centroid: c, axes, variances, ranges }
}

/// Gripper pose from a closing axis and an approach direction (must be
/// orthogonal unit vectors).
pub fn gripper_pose(center: Vector3<f64>, closing: Vector3<f64>, approach: Vector3<f64>) -> RigidTransform {
    let z = -approach;
    let y = z.cross(&closing);
    let r = Matrix3::from_columns(&[closing, y, z]);
    RigidTransform::new(r, center).expect("orthonormal gripper frame")
}

/// [`propose_grasps_from`] with the camera at the origin of the cloud frame.
pub fn propose_grasps(part: &PointCloud, max_width: f64, count: usize) -> Result<Vec<GraspCandidate>, GraspError> {
    propose_grasps_from(part, max_width, count, &Vector3::zeros(), &ProposalConfig::default())
}

/// Antipodal candidates from the principal axes of `part`, best first.
pub fn propose_grasps_from(
    part: &PointCloud,
    max_width: f64,
    count: usize,
    viewpoint: &Vector3<f64>,
    cfg: &ProposalConfig,
) -> Result<Vec<GraspCandidate>, GraspError> {
    if part.len() < 3 {
        return Err(GraspError::TooFewPoints(part.len()));
    }
    if !(max_width.is_finite() && max_width > 0.0) {
        return Err(GraspError::InvalidParameter(format!("max_width must be positive, got {max_width}")));
    }
    if !(cfg.clearance >= 0.0 && cfg.cone_half_angle.is_finite()) {
        return Err(GraspError::InvalidParameter("bad proposal config".into()));
    }
    cfg.gripper.validate()?;
    let frame = principal_frame(part, viewpoint);
    let ray = frame.centroid - viewpoint;
    let ray = if ray.norm() > 1e-12 { ray.normalize() } else { frame.axes[2] };

    let mut out: Vec<(GraspCandidate, usize)> = Vec::new();
    for closing_slot in [2usize, 1, 0] {
        let extent = frame.extent(closing_slot);
        if extent > max_width {
            continue;
        }
        let x = frame.axes[closing_slot];
        let (lo, hi) = frame.ranges[closing_slot];
        let center = frame.centroid + x * (0.5 * (lo + hi));
        let width = (extent + cfg.clearance).min(max_width);

        let mut approaches = Vec::new();
        let perp = ray - x * ray.dot(&x);
        if perp.norm() > 1e-6 {
            let a0 = perp.normalize();
            let steps = cfg.cone_steps as i64;
            for s in -steps..=steps {
                let angle = if steps == 0 { 0.0 } else { cfg.cone_half_angle * s as f64 / steps as f64 };
                let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(x), angle);
                approaches.push(rot * a0);
            }
        }
        for other in (0..3).filter(|&k| k != closing_slot) {
            approaches.push(frame.axes[other]);
            approaches.push(-frame.axes[other]);
        }

        for a in approaches {
            let pose = gripper_pose(center, x, a);
            let y = pose.rotation().column(1).into_owned();
            let half_w = cfg.gripper.finger_width / 2.0;
            // Smooth falloff so a point sitting on the finger edge cannot flip
            // the ranking under rounding.
            let support = part
                .points()
                .iter()
                .map(|p| (1.0 - ((p - center).dot(&y) / half_w).powi(2)).max(0.0))
                .sum::<f64>()
                / part.len() as f64;
            let facing = a.dot(&ray).max(0.0);
            let score = (1.0 - extent / max_width) + support + 0.25 * facing;
            let idx = out.len();
            out.push((GraspCandidate { pose, width, score }, idx));
        }
    }
    if out.is_empty() {
        return Err(GraspError::NoFeasibleGrasp);
    }
    // Near-ties are broken by generation order so tiny rounding differences
    // cannot reorder candidates.
    let key = |s: f64| (s * 1e9).round() as i64;
    out.sort_by(|(a, ia), (b, ib)| key(b.score).cmp(&key(a.score)).then(ia.cmp(ib)));
    Ok(out.into_iter().take(count.max(1)).map(|(c, _)| c).collect())
}

/// Voxel counts over the padded bounding box of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    counts: Vec<u32>,
}

impl OccupancyGrid {
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut v = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            v[k] = f as usize;
        }
        Some(v)
    }

    fn flat(&self, v: [usize; 3]) -> usize {
        (v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]
    }

    pub fn count(&self, v: [usize; 3]) -> u32 {
        self.counts[self.flat(v)]
    }

    pub fn is_occupied(&self, v: [usize; 3]) -> bool {
        self.count(v) > 0
    }

    pub fn occupied_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.voxel_size
    }

    /// Per-voxel point counts of another cloud on this grid's lattice.
    pub fn counts_of(&self, cloud: &PointCloud) -> Vec<u32> {
        let mut c = vec![0u32; self.counts.len()];
        for p in cloud.points() {
            if let Some(v) = self.voxel_of(p) {
                c[self.flat(v)] += 1;
            }
        }
        c
    }

    /// Centers of occupied voxels not explained by `part` alone.
    pub fn obstacles(&self, part: &PointCloud) -> Vec<Vector3<f64>> {
        let part_counts = self.counts_of(part);
        let mut out = Vec::new();
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let i = self.flat([x, y, z]);
                    if self.counts[i] > part_counts[i] {
                        out.push(self.voxel_center([x, y, z]));
                    }
                }
            }
        }
        out
    }
}

pub fn build_occupancy(scene: &PointCloud, voxel_size: f64) -> Result<OccupancyGrid, GraspError> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(GraspError::InvalidParameter(format!("voxel_size must be positive, got {voxel_size}")));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in scene.points() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let origin = lo - Vector3::repeat(voxel_size);
    let mut dims = [0usize; 3];
    for k in 0..3 {
        dims[k] = (((hi[k] + voxel_size - origin[k]) / voxel_size).floor() as usize + 1).max(1);
    }
    let mut grid = OccupancyGrid { origin, voxel_size, dims, counts: vec![0; dims[0] * dims[1] * dims[2]] };
    grid.counts = grid.counts_of(scene);
    Ok(grid)
}

/// True when no obstacle voxel touches the swept gripper.
pub fn collision_free(candidate: &GraspCandidate, obstacles: &[Vector3<f64>], voxel_size: f64, gripper: &GripperModel) -> bool {
    let inv = candidate.pose.inverse();
    let pad = voxel_size / 2.0;
    let boxes = gripper.swept_boxes(candidate.width);
    !obstacles.iter().any(|o| {
        let q = inv.apply(o);
        boxes.iter().any(|b| (0..3).all(|k| q[k] >= b.min[k] - pad && q[k] <= b.max[k] + pad))
    })
}

/// Highest-scoring candidate whose swept gripper avoids every voxel that is
/// not occupied by the part alone. Ties go to the earlier candidate.
pub fn filter_collisions(
    candidates: &[GraspCandidate],
    grid: &OccupancyGrid,
    gripper: &GripperModel,
    part: &PointCloud,
) -> Result<GraspCandidate, GraspError> {
    if candidates.is_empty() {
        return Err(GraspError::NoCandidates);
    }
    gripper.validate()?;
    let obstacles = grid.obstacles(part);
    let free = exec::map_slice(candidates, |c| collision_free(c, &obstacles, grid.voxel_size, gripper));
    let mut best: Option<&GraspCandidate> = None;
    for (c, ok) in candidates.iter().zip(free) {
        if ok && best.is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    best.copied().ok_or(GraspError::AllCollide)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform::tests::random_transform;
    use rand::Rng;

    fn box_cloud(half: Vector3<f64>, step: f64) -> PointCloud {
        let mut pts = Vec::new();
        let n = |h: f64| ((2.0 * h / step).round() as i64).max(1);
        let (nx, ny, nz) = (n(half.x), n(half.y), n(half.z));
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let p = Vector3::new(
                        -half.x + 2.0 * half.x * i as f64 / nx as f64,
                        -half.y + 2.0 * half.y * j as f64 / ny as f64,
                        -half.z + 2.0 * half.z * k as f64 / nz as f64,
                    );
                    // Surface samples only, like a depth sensor would give.
                    if i == 0 || j == 0 || k == 0 || i == nx || j == ny || k == nz {
                        pts.push(p);
                    }
                }
            }
        }
        PointCloud::new(pts).unwrap()
    }

    fn moved(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
        crate::geometry::apply_transform(t, cloud)
    }

    fn concat(a: &PointCloud, b: &PointCloud) -> PointCloud {
        PointCloud::new(a.points().iter().chain(b.points()).copied().collect()).unwrap()
    }

    #[test]
    fn thin_box_closes_across_its_thickness() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..10 {
            let t = random_transform(&mut rng, 3.0, 0.3);
            let part = moved(&box_cloud(Vector3::new(0.01, 0.05, 0.05), 0.004), &t);
            let view = t.apply(&Vector3::new(0.0, 0.0, -0.6));
            let grasps = propose_grasps_from(&part, 0.04, 50, &view, &ProposalConfig::default()).unwrap();
            let thin = t.apply_vector(&Vector3::x());
            let angle = grasps[0].closing_axis().dot(&thin).abs().min(1.0).acos();
            assert!(angle < 5f64.to_radians(), "angle {angle}");
            for g in &grasps {
                assert!(g.width > 0.0 && g.width <= 0.04);
                assert!(g.score >= 0.0);
            }
        }
    }

    #[test]
    fn wide_blob_has_no_grasp() {
        let mut rng = crate::rng::seeded(1);
        let pts: Vec<_> = (0..500)
            .map(|_| {
                let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.normalize() * 0.05
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        assert_eq!(propose_grasps(&cloud, 0.04, 10), Err(GraspError::NoFeasibleGrasp));
    }

    #[test]
    fn proposals_are_deterministic_and_sorted() {
        let part = box_cloud(Vector3::new(0.015, 0.03, 0.06), 0.005);
        let a = propose_grasps(&part, 0.08, 100).unwrap();
        let b = propose_grasps(&part, 0.08, 100).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score - 1e-9));
        assert!(propose_grasps(&part, 0.08, 3).unwrap().len() == 3);
    }

    #[test]
    fn too_few_points_and_bad_width() {
        let two = PointCloud::new(vec![Vector3::zeros(), Vector3::x()]).unwrap();
        assert_eq!(propose_grasps(&two, 0.1, 1), Err(GraspError::TooFewPoints(2)));
        let part = box_cloud(Vector3::repeat(0.01), 0.005);
        assert!(matches!(propose_grasps(&part, 0.0, 1), Err(GraspError::InvalidParameter(_))));
    }

    #[test]
    fn single_point_occupies_one_voxel() {
        let g = build_occupancy(&PointCloud::new(vec![Vector3::new(0.3, -0.2, 1.0)]).unwrap(), 0.005).unwrap();
        assert_eq!(g.occupied_count(), 1);
        assert!(g.is_occupied(g.voxel_of(&Vector3::new(0.3, -0.2, 1.0)).unwrap()));
    }

    #[test]
    fn two_points_leave_a_gap() {
        let s = 0.01;
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(10.0 * s, 0.0, 0.0);
        let g = build_occupancy(&PointCloud::new(vec![a, b]).unwrap(), s).unwrap();
        assert_eq!(g.occupied_count(), 2);
        let (va, vb) = (g.voxel_of(&a).unwrap(), g.voxel_of(&b).unwrap());
        assert!(g.is_occupied(va) && g.is_occupied(vb));
        for x in va[0] + 1..vb[0] {
            assert!(!g.is_occupied([x, va[1], va[2]]));
        }
    }

    #[test]
    fn dense_plane_count_matches_area() {
        let s = 0.005;
        let mut pts = Vec::new();
        let n = 400;
        for i in 0..n {
            for j in 0..n {
                pts.push(Vector3::new(0.2 * i as f64 / n as f64, 0.1 * j as f64 / n as f64, 0.5013));
            }
        }
        let g = build_occupancy(&PointCloud::new(pts).unwrap(), s).unwrap();
        let expected = 0.2 * 0.1 / (s * s);
        let got = g.occupied_count() as f64;
        assert!((got - expected).abs() <= 0.2 * expected, "{got} vs {expected}");
    }

    #[test]
    fn free_part_keeps_top_candidate() {
        let part = box_cloud(Vector3::new(0.01, 0.03, 0.03), 0.004);
        let cands = propose_grasps(&part, 0.05, 20).unwrap();
        let grid = build_occupancy(&part, 0.005).unwrap();
        let chosen = filter_collisions(&cands, &grid, &GripperModel::default(), &part).unwrap();
        assert_eq!(chosen, cands[0]);
    }

    fn wall_scene() -> (PointCloud, PointCloud) {
        let part = box_cloud(Vector3::new(0.02, 0.012, 0.031), 0.004);
        // Wall plane at x = +0.02, flush with the part face.
        let mut wall = Vec::new();
        for j in -30..=30 {
            for k in -30..=30 {
                wall.push(Vector3::new(0.02, j as f64 * 0.004, k as f64 * 0.004));
            }
        }
        let scene = concat(&part, &PointCloud::new(wall).unwrap());
        (part, scene)
    }

    #[test]
    fn wall_blocks_approach_through_it() {
        let (part, scene) = wall_scene();
        let grid = build_occupancy(&scene, 0.005).unwrap();
        let y = Vector3::y();
        let through = GraspCandidate { pose: gripper_pose(Vector3::zeros(), y, -Vector3::x()), width: 0.03, score: 2.0 };
        let open = GraspCandidate { pose: gripper_pose(Vector3::zeros(), y, Vector3::x()), width: 0.03, score: 1.0 };
        let g = GripperModel::default();
        let obstacles = grid.obstacles(&part);
        assert!(!collision_free(&through, &obstacles, grid.voxel_size, &g));
        assert!(collision_free(&open, &obstacles, grid.voxel_size, &g));
        assert_eq!(filter_collisions(&[through, open], &grid, &g, &part).unwrap(), open);
    }

    #[test]
    fn enclosed_part_collides_everywhere() {
        let part = box_cloud(Vector3::new(0.01, 0.02, 0.02), 0.004);
        let shell = box_cloud(Vector3::repeat(0.05), 0.004);
        let scene = concat(&part, &shell);
        let grid = build_occupancy(&scene, 0.005).unwrap();
        let cands = propose_grasps(&part, 0.05, 100).unwrap();
        assert_eq!(filter_collisions(&cands, &grid, &GripperModel::default(), &part), Err(GraspError::AllCollide));
        assert_eq!(filter_collisions(&[], &grid, &GripperModel::default(), &part), Err(GraspError::NoCandidates));
    }

    #[test]
    fn selection_is_equivariant() {
        let (part, scene) = wall_scene();
        let view = Vector3::new(-0.5, 0.1, -0.4);
        let cfg = ProposalConfig::default();
        let cands = propose_grasps_from(&part, 0.05, 100, &view, &cfg).unwrap();
        let g = GripperModel::default();
        let chosen = filter_collisions(&cands, &build_occupancy(&scene, 0.005).unwrap(), &g, &part).unwrap();
        let mut rng = crate::rng::seeded(11);
        for _ in 0..5 {
            let t = random_transform(&mut rng, 3.0, 1.0);
            let part_t = moved(&part, &t);
            let scene_t = moved(&scene, &t);
            let cands_t = propose_grasps_from(&part_t, 0.05, 100, &t.apply(&view), &cfg).unwrap();
            for (a, b) in cands.iter().zip(&cands_t) {
                let want = a.transformed(&t);
                assert!((want.pose.to_matrix4() - b.pose.to_matrix4()).amax() < 1e-9);
            }
            let got = filter_collisions(&cands_t, &build_occupancy(&scene_t, 0.005).unwrap(), &g, &part_t).unwrap();
            let want = chosen.transformed(&t);
            assert!((want.pose.to_matrix4() - got.pose.to_matrix4()).amax() < 1e-9);
        }
    }
}
