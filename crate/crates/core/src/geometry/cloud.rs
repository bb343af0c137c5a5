use nalgebra::Vector3;

use super::{GeometryError, RigidTransform};

/// `M ≥ 1` finite points, each optionally tagged with the pixel it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    source_pixels: Vec<[u32; 2]>,
}

impl PointCloud {
    /// Cloud without pixel provenance (pixels are recorded as `[0, 0]`).
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        let n = points.len();
        Self::with_pixels(points, vec![[0, 0]; n])
    }

    pub fn with_pixels(
        points: Vec<Vector3<f64>>,
        source_pixels: Vec<[u32; 2]>,
    ) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if points.len() != source_pixels.len() {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} points but {} source pixels",
                points.len(),
                source_pixels.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points, source_pixels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn source_pixels(&self) -> &[[u32; 2]] {
        &self.source_pixels
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

/// Rows `(x, y, z, 1)`.
pub fn to_homogeneous(cloud: &PointCloud) -> Vec<[f64; 4]> {
    cloud.points.iter().map(|p| [p.x, p.y, p.z, 1.0]).collect()
}

/// Map every point by `T`, keeping provenance.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        source_pixels: cloud.source_pixels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform::tests::random_transform;
    use rand::Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = crate::rng::seeded(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn homogeneous_appends_one() {
        let c = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(to_homogeneous(&c), vec![[1.0, 2.0, 3.0, 1.0]]);
        let big = random_cloud(5, 100);
        let h = to_homogeneous(&big);
        assert_eq!(h.len(), 100);
        assert_eq!(h.iter().map(|r| r[3]).sum::<f64>(), 100.0);
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        assert_eq!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud));
        assert_eq!(
            PointCloud::new(vec![Vector3::zeros(), Vector3::new(f64::NAN, 0.0, 0.0)]),
            Err(GeometryError::NonFinite(1))
        );
    }

    #[test]
    fn identity_and_translation() {
        let c = random_cloud(6, 20);
        assert_eq!(apply_transform(&RigidTransform::identity(), &c), c);
        let one = PointCloud::new(vec![Vector3::new(1.0, 1.0, 1.0)]).unwrap();
        let moved = apply_transform(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.0)), &one);
        assert_eq!(moved.points()[0], Vector3::new(1.0, 1.0, 2.0));
    }

    #[test]
    fn transform_is_an_isometry() {
        let mut rng = crate::rng::seeded(7);
        for seed in 0..20 {
            let c = random_cloud(seed, 60);
            let t = random_transform(&mut rng, 3.1, 3.0);
            let m = apply_transform(&t, &c);
            assert_eq!(m.source_pixels(), c.source_pixels());
            for i in 0..c.len() {
                for j in (i + 1)..c.len() {
                    let d0 = (c.points()[i] - c.points()[j]).norm();
                    let d1 = (m.points()[i] - m.points()[j]).norm();
                    assert!((d0 - d1).abs() <= 1e-12 * d0.max(1.0));
                }
            }
        }
    }
}
