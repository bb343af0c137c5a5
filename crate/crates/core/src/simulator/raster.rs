//! Minimal z-buffer rasterizer for textured boxes.
//!
//! Faces are split into two triangles; coverage is decided at pixel
//! centers with edge functions and depth comes from the exact ray/plane
//! intersection, so metric depth is exact up to storage precision.

use nalgebra::Vector3;

use super::{BoxPrimitive, Texture};
use crate::geometry::{CameraIntrinsics, RigidTransform};

/// Triangles with any vertex closer than this are culled.
pub const NEAR_PLANE: f64 = 0.02;

/// Which surface a pixel shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurfaceId {
    /// Index into part primitives followed by distractors.
    pub primitive: u32,
    pub face: u8,
}

pub struct Raster {
    pub depth: Vec<f64>,
    pub rgb: Vec<[f32; 3]>,
    pub ids: Vec<Option<SurfaceId>>,
}

/// Face `f`: normal axis `f / 2`, sign `+` for even `f`.
fn face_axes(face: u8) -> (usize, f64, usize, usize) {
    let axis = (face / 2) as usize;
    let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
    (axis, sign, (axis + 1) % 3, (axis + 2) % 3)
}

fn face_corners(b: &BoxPrimitive, face: u8) -> [Vector3<f64>; 4] {
    let (n, s, a, c) = face_axes(face);
    let h = b.half_extents;
    let corner = |sa: f64, sc: f64| {
        let mut p = Vector3::zeros();
        p[n] = s * h[n];
        p[a] = sa * h[a];
        p[c] = sc * h[c];
        p
    };
    [corner(-1.0, -1.0), corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0)]
}

/// Outward face normal in box coordinates.
pub fn face_normal(face: u8) -> Vector3<f64> {
    let (n, s, _, _) = face_axes(face);
    let mut v = Vector3::zeros();
    v[n] = s;
    v
}

fn hash3(seed: u64, a: i64, b: i64) -> u64 {
    let mut z = seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Color of a box surface at a point given in box coordinates.
pub fn texture_color(texture: &Texture, face: u8, local: &Vector3<f64>) -> [f32; 3] {
    match *texture {
        Texture::Uniform(c) => c,
        Texture::Checker { cell, seed } => {
            let (_, _, a, c) = face_axes(face);
            let i = (local[a] / cell).floor() as i64;
            let j = (local[c] / cell).floor() as i64;
            let h = hash3(seed ^ (face as u64) << 56, i, j);
            let ch = |k: u32| ((h >> (k * 16)) & 0xffff) as f32 / 65535.0;
            [ch(0), ch(1), ch(2)]
        }
    }
}

/// Rasterize primitives placed by `poses` (box → camera).
pub fn rasterize(k: &CameraIntrinsics, prims: &[(&BoxPrimitive, RigidTransform)]) -> Raster {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut out = Raster { depth: vec![f64::INFINITY; w * h], rgb: vec![[0.0; 3]; w * h], ids: vec![None; w * h] };
    for (pi, (prim, pose)) in prims.iter().enumerate() {
        let inv = pose.inverse();
        for face in 0..6u8 {
            let corners = face_corners(prim, face).map(|c| pose.apply(&c));
            let normal = pose.apply_vector(&face_normal(face));
            // Back-face culling: camera sits at the origin.
            if normal.dot(&corners[0]) >= 0.0 {
                continue;
            }
            let plane_d = normal.dot(&corners[0]);
            for tri in [[0usize, 1, 2], [0, 2, 3]] {
                let v = tri.map(|i| corners[i]);
                if v.iter().any(|p| p.z < NEAR_PLANE) {
                    continue;
                }
                let s = v.map(|p| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy));
                let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
                if area.abs() < 1e-12 {
                    continue;
                }
                let min_u = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
                let max_u = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
                let min_v = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
                let max_v = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
                if max_u < 0.0 || max_v < 0.0 {
                    continue;
                }
                for py in min_v..=(max_v as usize) {
                    for px in min_u..=(max_u as usize) {
                        let (x, y) = (px as f64, py as f64);
                        let e = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (x - a.0) * (b.1 - a.1);
                        let w0 = e(s[1], s[2]) * area.signum();
                        let w1 = e(s[2], s[0]) * area.signum();
                        let w2 = e(s[0], s[1]) * area.signum();
                        if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                            continue;
                        }
                        let ray = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
                        let denom = normal.dot(&ray);
                        if denom.abs() < 1e-15 {
                            continue;
                        }
                        let z = plane_d / denom;
                        let idx = py * w + px;
                        if z > NEAR_PLANE && z < out.depth[idx] {
                            out.depth[idx] = z;
                            let local = inv.apply(&(ray * z));
                            out.rgb[idx] = texture_color(&prim.texture, face, &local);
                            out.ids[idx] = Some(SurfaceId { primitive: pi as u32, face });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest positive ray parameter at which `origin + t·dir` enters the box.
pub fn ray_box_entry(prim: &BoxPrimitive, pose: &RigidTransform, dir: &Vector3<f64>) -> Option<f64> {
    let inv = pose.inverse();
    let o = inv.apply(&Vector3::zeros());
    let d = inv.apply_vector(dir);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let h = prim.half_extents[a];
        if d[a].abs() < 1e-15 {
            if o[a].abs() > h {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t1 > 0.0).then_some(t0.max(0.0))
}
