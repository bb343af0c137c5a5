//! Object-part scene flow to end-effector trajectories.
//!
//! The pipeline lifts a masked object part out of an RGBD observation,
//! tracks it through a sequence of future frames (provided, rendered, or
//! generated by the toy video diffusion model), turns the tracks into a
//! 3D scene flow, solves the per-step rigid motion of the part and chains
//! it onto an initial grasp pose.
//!
//! Module map:
//!
//! - [`geometry`]: pinhole camera, RGBD frames, masks, point clouds, SE(3).
//! - [`simulator`]: procedural z-buffered scenes with exact ground truth.
//! - [`sceneflow`]: track sets, scene flow construction, block matching.
//! - [`solver`]: weighted Kabsch fitting, RANSAC, per-step sequences.
//! - [`grasp`]: PCA grasp proposals, occupancy grids, collision filtering.
//! - [`diffusion`]: factorized spatio-temporal U-Net, training and sampling.
//! - [`planner`]: trajectories, the end-to-end `plan`, episodes, benchmarks.
//! - [`io`]: binary and JSON file formats shared with the CLI.

pub mod diffusion;
pub mod exec;
pub mod geometry;
pub mod grasp;
pub mod io;
pub mod planner;
pub mod rng;
pub mod sceneflow;
pub mod simulator;
pub mod solver;

pub use geometry::{CameraIntrinsics, PartMask, PointCloud, RgbdFrame, RigidTransform};
