//! Pinhole camera, RGBD frames, part masks, point clouds and SE(3).

mod camera;
mod cloud;
pub(crate) mod transform;

pub use camera::{project, unproject, unproject_pixel, CameraIntrinsics, PartMask, RgbdFrame};
pub use cloud::{apply_transform, to_homogeneous, PointCloud};
pub use transform::{compose, RigidTransform};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no masked pixel has valid depth")]
    EmptySelection,
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("not a rotation: {0}")]
    NotARotation(String),
    #[error("point cloud must hold at least one finite point")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
}
