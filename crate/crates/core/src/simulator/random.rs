use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoxPrimitive, SyntheticScene, Texture};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::rng::{self, SeededRng};

/// How the part moves over the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MotionStyle {
    Static,
    /// Same camera-frame translation every step.
    Translation([f64; 3]),
    /// Random rotation about the part center (angle up to `max_angle`
    /// radians) plus a random translation (each axis up to
    /// `max_translation` meters) per step.
    Random { max_angle: f64, max_translation: f64 },
    /// One of a closed set of manipulation primitives, used as the task
    /// label of diffusion training clips: 0 slide right, 1 slide left,
    /// 2 lift, 3 twist.
    Task(u32),
}

pub const TASK_NAMES: [&str; 4] = ["slide right", "slide left", "lift", "twist"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub num_steps: usize,
    /// Range of the part's distance from the camera, meters.
    pub part_distance: (f64, f64),
    pub motion: MotionStyle,
    /// Checker cell size on the part, meters.
    pub texture_cell: f64,
    pub textured_part: bool,
    pub depth_noise: f64,
    pub rgb_noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            hfov_deg: 60.0,
            num_steps: 8,
            part_distance: (0.55, 0.7),
            motion: MotionStyle::Random { max_angle: 0.05, max_translation: 0.01 },
            texture_cell: 0.01,
            textured_part: true,
            depth_noise: 0.0,
            rgb_noise: 0.0,
        }
    }
}

fn sym(rng: &mut SeededRng, a: f64) -> f64 {
    rng.random_range(-a..=a)
}

fn random_unit(rng: &mut SeededRng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(sym(rng, 1.0), sym(rng, 1.0), sym(rng, 1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Step that rotates by `axis_angle` about `center` then translates by `delta`.
fn about_center(axis_angle: Vector3<f64>, center: Vector3<f64>, delta: Vector3<f64>) -> RigidTransform {
    let r = RigidTransform::from_axis_angle(axis_angle, Vector3::zeros());
    RigidTransform::from_axis_angle(axis_angle, center - r.apply(&center) + delta)
}

/// A bar-with-cap part floating in front of a textured back wall with two
/// side boxes, moving according to `params.motion`.
pub fn random_scene(seed: u64, params: &SceneParams) -> SyntheticScene {
    let mut rng = rng::seeded(seed);
    let k = CameraIntrinsics::from_fov(params.width, params.height, params.hfov_deg).expect("valid camera");

    let depth = rng.random_range(params.part_distance.0..=params.part_distance.1);
    let center = Vector3::new(sym(&mut rng, 0.05), sym(&mut rng, 0.04), depth);
    let tilt = Vector3::new(sym(&mut rng, 0.4), sym(&mut rng, 0.4), sym(&mut rng, 0.8));
    let bar_pose = RigidTransform::from_axis_angle(tilt, center);
    let part_texture = |rng: &mut SeededRng| {
        if params.textured_part {
            Texture::Checker { cell: params.texture_cell, seed: rng.random() }
        } else {
            Texture::Uniform([0.8, 0.3, 0.2])
        }
    };
    let bar = BoxPrimitive::new(bar_pose, Vector3::new(0.06, 0.015, 0.02), part_texture(&mut rng));
    let cap_pose = bar_pose.compose(&RigidTransform::from_translation(Vector3::new(0.075, 0.0, 0.0)));
    let cap = BoxPrimitive::new(cap_pose, Vector3::new(0.015, 0.03, 0.03), part_texture(&mut rng));

    let wall = BoxPrimitive::new(
        RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.3)),
        Vector3::new(2.0, 2.0, 0.01),
        Texture::Checker { cell: 0.03, seed: rng.random() },
    );
    let mut distractors = vec![wall];
    for side in [-1.0, 1.0] {
        let pos = Vector3::new(side * rng.random_range(0.3..0.4), sym(&mut rng, 0.1), rng.random_range(0.85..1.05));
        let half = Vector3::new(rng.random_range(0.04..0.08), rng.random_range(0.04..0.08), rng.random_range(0.04..0.08));
        let pose = RigidTransform::from_axis_angle(Vector3::new(0.0, sym(&mut rng, 0.6), 0.0), pos);
        distractors.push(BoxPrimitive::new(pose, half, Texture::Checker { cell: 0.02, seed: rng.random() }));
    }

    let mut motion = Vec::with_capacity(params.num_steps);
    let mut c = center;
    let task_gain = rng.random_range(0.8..1.2);
    for _ in 0..params.num_steps {
        let step = match params.motion {
            MotionStyle::Static => RigidTransform::identity(),
            MotionStyle::Translation(t) => RigidTransform::from_translation(Vector3::from(t)),
            MotionStyle::Random { max_angle, max_translation } => {
                let axis = random_unit(&mut rng);
                let angle = rng.random_range(0.0..=max_angle);
                let delta = Vector3::new(
                    sym(&mut rng, max_translation),
                    sym(&mut rng, max_translation),
                    sym(&mut rng, max_translation),
                );
                about_center(axis * angle, c, delta)
            }
            MotionStyle::Task(task) => {
                let d = 0.012 * task_gain;
                match task % 4 {
                    0 => RigidTransform::from_translation(Vector3::new(d, 0.0, 0.0)),
                    1 => RigidTransform::from_translation(Vector3::new(-d, 0.0, 0.0)),
                    2 => RigidTransform::from_translation(Vector3::new(0.0, -d, 0.0)),
                    _ => about_center(Vector3::new(0.0, 0.0, 0.12 * task_gain), c, Vector3::zeros()),
                }
            }
        };
        c = step.apply(&c);
        motion.push(step);
    }

    SyntheticScene {
        part: vec![bar, cap],
        distractors,
        motion,
        intrinsics: k,
        camera_pose: RigidTransform::identity(),
        seed: rng::derive_seed(seed, 0x5eed),
        depth_noise: params.depth_noise,
        rgb_noise: params.rgb_noise,
    }
}
