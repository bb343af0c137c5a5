//! Rigid motion of the object part from its scene flow.
//!
//! Each step solves `min_T Σ w_i ‖T(p_i) − (p_i + s_i)‖²` over SE(3) in
//! closed form (weighted Kabsch): centroids, SVD of the weighted
//! cross-covariance, reflection-corrected rotation, translation from the
//! centroids. The homogeneous 4×4 form is rebuilt on output.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, RigidTransform};
use crate::rng;
use crate::sceneflow::SceneFlowField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 3 valid points, got {0}")]
    TooFewPoints(usize),
    #[error("valid points are collinear or coincident; rotation is unobservable")]
    DegenerateGeometry,
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A fitting failure at a particular step, with the steps solved before it.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {step}: {source}")]
pub struct SequenceError {
    pub step: usize,
    pub source: FitError,
    pub completed: Vec<TransformFitResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformFitResult {
    pub transform: RigidTransform,
    /// Weighted RMS of `‖T(p) − q‖` over the points used in the final fit.
    pub rms_residual: f64,
    pub inlier_count: usize,
    pub inlier_mask: Vec<bool>,
}

/// Relative spread below which the second principal direction of the
/// centered source is treated as absent.
const COLLINEAR_TOLERANCE: f64 = 1e-10;

fn check_inputs(
    source: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    valid: &[bool],
    weights: Option<&[f64]>,
) -> Result<(), FitError> {
    let m = source.len();
    if displacements.len() != m || valid.len() != m {
        return Err(FitError::ShapeMismatch(format!(
            "{m} points, {} displacements, {} flags",
            displacements.len(),
            valid.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(FitError::ShapeMismatch(format!("{} weights for {m} points", w.len())));
        }
        if let Some(x) = w.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
            return Err(FitError::InvalidParameter(format!("weight {x} is not a finite non-negative number")));
        }
    }
    Ok(())
}

/// Closed-form weighted least-squares rigid fit on the selected points.
fn kabsch(
    source: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    selected: &[bool],
    weights: Option<&[f64]>,
) -> Result<(RigidTransform, f64), FitError> {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let idx: Vec<usize> = (0..source.len()).filter(|&i| selected[i] && w(i) > 0.0).collect();
    if idx.len() < 3 {
        return Err(FitError::TooFewPoints(idx.len()));
    }
    let total: f64 = idx.iter().map(|&i| w(i)).sum();
    let c_src = idx.iter().map(|&i| source[i] * w(i)).sum::<Vector3<f64>>() / total;
    let c_tgt = idx.iter().map(|&i| (source[i] + displacements[i]) * w(i)).sum::<Vector3<f64>>() / total;

    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for &i in &idx {
        let a = source[i] - c_src;
        let b = source[i] + displacements[i] - c_tgt;
        h += w(i) * a * b.transpose();
        spread += w(i) * a * a.transpose();
    }
    let mut ev = spread.symmetric_eigenvalues().as_slice().to_vec();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= COLLINEAR_TOLERANCE * ev[0] {
        return Err(FitError::DegenerateGeometry);
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = c_tgt - r * c_src;
    let transform = RigidTransform::new(r, t).map_err(|e| FitError::InvalidParameter(e.to_string()))?;

    let sq: f64 = idx
        .iter()
        .map(|&i| w(i) * (transform.apply(&source[i]) - source[i] - displacements[i]).norm_squared())
        .sum();
    Ok((transform, (sq / total).sqrt()))
}

/// Weighted Kabsch fit of the rigid motion carrying `source` to
/// `source + displacements` over the valid points. All valid points count
/// as inliers.
pub fn fit_rigid(
    source: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    valid: &[bool],
    weights: Option<&[f64]>,
) -> Result<TransformFitResult, FitError> {
    check_inputs(source, displacements, valid, weights)?;
    let (transform, rms_residual) = kabsch(source, displacements, valid, weights)?;
    Ok(TransformFitResult {
        transform,
        rms_residual,
        inlier_count: valid.iter().filter(|&&v| v).count(),
        inlier_mask: valid.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance in meters.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 200, threshold: 0.01, seed: 0 }
    }
}

fn inliers_of(
    t: &RigidTransform,
    source: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    valid: &[bool],
    threshold: f64,
) -> (Vec<bool>, f64) {
    let mut mask = vec![false; source.len()];
    let mut sq = 0.0;
    for i in 0..source.len() {
        if valid[i] {
            let r = (t.apply(&source[i]) - source[i] - displacements[i]).norm();
            if r < threshold {
                mask[i] = true;
                sq += r * r;
            }
        }
    }
    (mask, sq)
}

/// RANSAC over 3-point minimal samples, refined by [`fit_rigid`] on the
/// consensus set. Models are ranked by inlier count, then lower residual,
/// then earlier iteration.
pub fn fit_rigid_ransac(
    source: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    valid: &[bool],
    cfg: &RansacConfig,
) -> Result<TransformFitResult, FitError> {
    check_inputs(source, displacements, valid, None)?;
    if cfg.iterations < 1 {
        return Err(FitError::InvalidParameter("iterations must be >= 1".into()));
    }
    if !(cfg.threshold > 0.0) {
        return Err(FitError::InvalidParameter("threshold must be positive".into()));
    }
    let candidates: Vec<usize> = (0..source.len()).filter(|&i| valid[i]).collect();
    if candidates.len() < 3 {
        return Err(FitError::TooFewPoints(candidates.len()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    let mut sample_mask = vec![false; source.len()];
    for _ in 0..cfg.iterations {
        let picks = sample(&mut rng, candidates.len(), 3);
        for p in picks.iter() {
            sample_mask[candidates[p]] = true;
        }
        let model = kabsch(source, displacements, &sample_mask, None);
        for p in picks.iter() {
            sample_mask[candidates[p]] = false;
        }
        let Ok((t, _)) = model else { continue };
        let (mask, sq) = inliers_of(&t, source, displacements, valid, cfg.threshold);
        let count = mask.iter().filter(|&&m| m).count();
        let better = match &best {
            None => true,
            Some((bc, bsq, _)) => count > *bc || (count == *bc && sq < *bsq),
        };
        if better {
            best = Some((count, sq, mask));
        }
    }
    let Some((count, _, mut mask)) = best else {
        return Err(FitError::DegenerateGeometry);
    };
    if count < 3 {
        return Err(FitError::TooFewPoints(count));
    }
    // Refit on the consensus set until it stops changing.
    let mut fit = kabsch(source, displacements, &mask, None)?;
    for _ in 0..5 {
        let (next, _) = inliers_of(&fit.0, source, displacements, valid, cfg.threshold);
        if next == mask || next.iter().filter(|&&m| m).count() < 3 {
            break;
        }
        mask = next;
        fit = kabsch(source, displacements, &mask, None)?;
    }
    Ok(TransformFitResult {
        transform: fit.0,
        rms_residual: fit.1,
        inlier_count: mask.iter().filter(|&&m| m).count(),
        inlier_mask: mask,
    })
}

/// Per-point weighting for the sequence solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// `w = 1/z²` in the camera frame of the source cloud.
    InverseDepthSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Use RANSAC at every step (seeded per step from `ransac.seed`).
    pub robust: bool,
    pub ransac: RansacConfig,
    pub weighting: Weighting,
}

impl SolveOptions {
    pub fn robust() -> Self {
        Self { robust: true, ..Default::default() }
    }
}

/// Solve `T_1..T_N` from the frame-0 part cloud and its scene flow.
///
/// The source for step `n` is the tracked cloud `p_{n−1}`: after each step
/// valid points advance by their measured displacement, so tracker evidence
/// is never replaced by the model. Points without a measurement at a step
/// are carried forward by the fitted `T_n` so they can rejoin later.
pub fn solve_transform_sequence(
    cloud0: &PointCloud,
    flow: &SceneFlowField,
    opts: &SolveOptions,
) -> Result<Vec<TransformFitResult>, SequenceError> {
    let fail = |step, source, completed| SequenceError { step, source, completed };
    if flow.num_points() != cloud0.len() {
        return Err(fail(
            1,
            FitError::ShapeMismatch(format!("flow has {} points, cloud has {}", flow.num_points(), cloud0.len())),
            vec![],
        ));
    }
    let mut current: Vec<Vector3<f64>> = cloud0.points().to_vec();
    let mut results = Vec::with_capacity(flow.num_steps());
    for step in 1..=flow.num_steps() {
        let disp = flow.step_displacements(step);
        let valid = flow.step_validity(step);
        let fit = if opts.robust {
            let cfg = RansacConfig { seed: rng::derive_seed(opts.ransac.seed, step as u64), ..opts.ransac };
            fit_rigid_ransac(&current, &disp, &valid, &cfg)
        } else {
            let weights: Option<Vec<f64>> = match opts.weighting {
                Weighting::Uniform => None,
                Weighting::InverseDepthSquared => Some(current.iter().map(|p| 1.0 / (p.z * p.z)).collect()),
            };
            fit_rigid(&current, &disp, &valid, weights.as_deref())
        };
        let fit = fit.map_err(|e| fail(step, e, results.clone()))?;
        for i in 0..current.len() {
            current[i] = if valid[i] { current[i] + disp[i] } else { fit.transform.apply(&current[i]) };
        }
        results.push(fit);
    }
    Ok(results)
}
