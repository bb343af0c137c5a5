use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{GeometryError, PointCloud};

/// Pinhole intrinsics without distortion. Pixel `(u, v)` addresses the
/// center of column `u`, row `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the given horizontal field of view and a centered
    /// principal point.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn rescaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// One RGBD observation. Buffers are row-major; invalid depth is stored
/// as 0 with `valid = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl RgbdFrame {
    pub fn new(
        width: u32,
        height: u32,
        rgb: Vec<[f32; 3]>,
        depth: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, GeometryError> {
        let n = width as usize * height as usize;
        if rgb.len() != n || depth.len() != n || valid.len() != n {
            return Err(GeometryError::ShapeMismatch(format!(
                "expected {n} pixels, got rgb {} depth {} valid {}",
                rgb.len(),
                depth.len(),
                valid.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && !(depth[i] > 0.0 && depth[i].is_finite())) {
            return Err(GeometryError::ShapeMismatch(format!(
                "pixel {i} is marked valid but has depth {}",
                depth[i]
            )));
        }
        Ok(Self { width, height, rgb, depth, valid })
    }

    pub fn blank(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, rgb: vec![[0.0; 3]; n], depth: vec![0.0; n], valid: vec![false; n] }
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    /// Depth at the pixel nearest to `(u, v)`, if inside the image and valid.
    pub fn depth_nearest(&self, u: f64, v: f64) -> Option<f64> {
        let (iu, iv) = (u.round(), v.round());
        if !(iu >= 0.0 && iv >= 0.0 && iu < self.width as f64 && iv < self.height as f64) {
            return None;
        }
        let i = self.index(iu as u32, iv as u32);
        self.valid[i].then(|| self.depth[i] as f64)
    }

    /// Luma image used by the block matcher.
    pub fn gray(&self) -> Vec<f32> {
        self.rgb.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
    }

    pub fn check_matches(&self, k: &CameraIntrinsics) -> Result<(), GeometryError> {
        if self.width != k.width || self.height != k.height {
            return Err(GeometryError::ShapeMismatch(format!(
                "frame is {}x{}, intrinsics are {}x{}",
                self.width, self.height, k.width, k.height
            )));
        }
        Ok(())
    }
}

/// Binary selection of the object part in image space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMask {
    width: u32,
    height: u32,
    mask: Vec<bool>,
    pixel_count: usize,
}

impl PartMask {
    pub fn new(width: u32, height: u32, mask: Vec<bool>) -> Result<Self, GeometryError> {
        if mask.len() != width as usize * height as usize {
            return Err(GeometryError::ShapeMismatch(format!(
                "mask has {} entries for {}x{}",
                mask.len(),
                width,
                height
            )));
        }
        let pixel_count = mask.iter().filter(|&&m| m).count();
        Ok(Self { width, height, mask, pixel_count })
    }

    /// Every pixel selected.
    pub fn full(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, mask: vec![true; n], pixel_count: n }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[(u32, u32)]) -> Result<Self, GeometryError> {
        let mut mask = vec![false; width as usize * height as usize];
        for &(u, v) in pixels {
            if u >= width || v >= height {
                return Err(GeometryError::ShapeMismatch(format!("pixel ({u},{v}) outside mask")));
            }
            mask[v as usize * width as usize + u as usize] = true;
        }
        Self::new(width, height, mask)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }
    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.mask[v as usize * self.width as usize + u as usize]
    }
}

/// Back-project a (possibly sub-pixel) image position at metric depth.
#[inline]
pub fn unproject_pixel(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth)
}

/// Lift every masked pixel with valid depth into a camera-frame point.
/// Pixels are visited row-major; invalid depth is dropped.
pub fn unproject(
    frame: &RgbdFrame,
    mask: &PartMask,
    k: &CameraIntrinsics,
) -> Result<PointCloud, GeometryError> {
    frame.check_matches(k)?;
    if mask.width != frame.width || mask.height != frame.height {
        return Err(GeometryError::ShapeMismatch(format!(
            "mask is {}x{}, frame is {}x{}",
            mask.width, mask.height, frame.width, frame.height
        )));
    }
    let mut points = Vec::with_capacity(mask.pixel_count);
    let mut pixels = Vec::with_capacity(mask.pixel_count);
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = frame.index(u, v);
            if mask.mask[i] && frame.valid[i] {
                points.push(unproject_pixel(u as f64, v as f64, frame.depth[i] as f64, k));
                pixels.push([u, v]);
            }
        }
    }
    if points.is_empty() {
        return Err(GeometryError::EmptySelection);
    }
    PointCloud::with_pixels(points, pixels)
}

/// Project a camera-frame point to `(u, v, depth)`.
#[inline]
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 110.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn frame_with(depths: &[((u32, u32), f32)]) -> RgbdFrame {
        let mut f = RgbdFrame::blank(128, 96);
        for &((u, v), d) in depths {
            let i = f.index(u, v);
            f.depth[i] = d;
            f.valid[i] = true;
        }
        f
    }

    #[test]
    fn principal_point_ray() {
        let f = frame_with(&[((64, 48), 2.0)]);
        let m = PartMask::from_pixels(128, 96, &[(64, 48)]).unwrap();
        let c = unproject(&f, &m, &k()).unwrap();
        assert_eq!(c.points()[0], Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(c.source_pixels()[0], [64, 48]);
    }

    #[test]
    fn unit_slope_ray() {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 256, 96).unwrap();
        let mut f = RgbdFrame::blank(256, 96);
        let i = f.index(164, 48);
        f.depth[i] = 1.0;
        f.valid[i] = true;
        let m = PartMask::from_pixels(256, 96, &[(164, 48)]).unwrap();
        let c = unproject(&f, &m, &k).unwrap();
        assert_eq!(c.points()[0], Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn project_examples() {
        let k = k();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap(), (64.0, 48.0, 1.0));
        assert_eq!(project(&Vector3::new(1.0, 0.0, 1.0), &k).unwrap(), (164.0, 48.0, 1.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &k),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn empty_selection_and_invalid_depth_dropped() {
        let mut f = frame_with(&[((3, 3), 1.0)]);
        let m = PartMask::from_pixels(128, 96, &[(3, 3), (4, 4)]).unwrap();
        assert_eq!(unproject(&f, &m, &k()).unwrap().len(), 1);
        let i = f.index(3, 3);
        f.valid[i] = false;
        f.depth[i] = 0.0;
        assert_eq!(unproject(&f, &m, &k()), Err(GeometryError::EmptySelection));
    }

    #[test]
    fn mask_shape_checked() {
        let f = frame_with(&[((3, 3), 1.0)]);
        let m = PartMask::full(64, 48);
        assert!(matches!(unproject(&f, &m, &k()), Err(GeometryError::ShapeMismatch(_))));
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -0.1, 4, 4).is_err());
        assert!(CameraIntrinsics::from_fov(128, 96, 60.0).is_ok());
    }

    #[test]
    fn roundtrip_random_pixels() {
        let k = k();
        let mut rng = crate::rng::seeded(11);
        let mut f = RgbdFrame::blank(128, 96);
        let mut px = Vec::new();
        for _ in 0..1000 {
            let (u, v) = (rng.random_range(0..128u32), rng.random_range(0..96u32));
            let i = f.index(u, v);
            f.depth[i] = rng.random_range(0.1f32..10.0);
            f.valid[i] = true;
            px.push((u, v));
        }
        let m = PartMask::from_pixels(128, 96, &px).unwrap();
        let cloud = unproject(&f, &m, &k).unwrap();
        for (p, s) in cloud.points().iter().zip(cloud.source_pixels()) {
            let (u, v, d) = project(p, &k).unwrap();
            assert!((u - s[0] as f64).abs() < 1e-9);
            assert!((v - s[1] as f64).abs() < 1e-9);
            assert!((d - f.depth[f.index(s[0], s[1])] as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_depth_lookup() {
        let f = frame_with(&[((5, 6), 1.5)]);
        assert_eq!(f.depth_nearest(5.4, 5.6), Some(1.5));
        assert_eq!(f.depth_nearest(5.6, 6.0), None);
        assert_eq!(f.depth_nearest(-0.6, 0.0), None);
        assert_eq!(f.depth_nearest(200.0, 0.0), None);
    }
}
