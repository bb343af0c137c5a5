use serde::{Deserialize, Serialize};

use super::{FlowError, TrackSet};
use crate::exec;
use crate::geometry::{PartMask, RgbdFrame};

/// Frame-to-frame ZNCC block matcher settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMatchConfig {
    /// Odd template side length in pixels.
    pub window: usize,
    pub search_radius: usize,
    /// Matches scoring below this are reported invisible.
    pub min_zncc: f64,
    /// Parabolic sub-pixel refinement of the best integer offset.
    pub subpixel: bool,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self { window: 7, search_radius: 8, min_zncc: 0.5, subpixel: false }
    }
}

impl BlockMatchConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(FlowError::InvalidConfig(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if self.search_radius < 1 {
            return Err(FlowError::InvalidConfig("search radius must be >= 1".into()));
        }
        Ok(())
    }
}

struct Gray<'a> {
    w: i64,
    h: i64,
    px: &'a [f32],
}

impl Gray<'_> {
    /// Zero-mean, unit-norm patch centered on `(u, v)`, or `None` if the
    /// window leaves the image or is flat.
    fn patch(&self, u: i64, v: i64, half: i64) -> Option<Vec<f64>> {
        if u - half < 0 || v - half < 0 || u + half >= self.w || v + half >= self.h {
            return None;
        }
        let side = (2 * half + 1) as usize;
        let mut p = Vec::with_capacity(side * side);
        for y in (v - half)..=(v + half) {
            let row = (y * self.w) as usize;
            p.extend(self.px[row + (u - half) as usize..=row + (u + half) as usize].iter().map(|&x| x as f64));
        }
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        p.iter_mut().for_each(|x| *x -= mean);
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        p.iter_mut().for_each(|x| *x /= norm);
        Some(p)
    }
}

fn zncc(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn parabola_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Track one point from `prev` to `next`. Returns the new position and
/// whether the match passed the ZNCC threshold.
fn match_step(prev: &Gray, next: &Gray, pos: [f64; 2], cfg: &BlockMatchConfig) -> Option<[f64; 2]> {
    let half = (cfg.window / 2) as i64;
    let r = cfg.search_radius as i64;
    let (u0, v0) = (pos[0].round() as i64, pos[1].round() as i64);
    let template = prev.patch(u0, v0, half)?;
    let side = (2 * r + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -r..=r {
        for dx in -r..=r {
            if let Some(cand) = next.patch(u0 + dx, v0 + dy, half) {
                let s = zncc(&template, &cand);
                scores[((dy + r) as usize) * side + (dx + r) as usize] = s;
                // Ties keep the first offset in scan order.
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, dx, dy));
                }
            }
        }
    }
    let (score, dx, dy) = best?;
    if score < cfg.min_zncc {
        return None;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    if cfg.subpixel {
        let at = |x: i64, y: i64| -> Option<f64> {
            if x.abs() > r || y.abs() > r {
                return None;
            }
            let s = scores[((y + r) as usize) * side + (x + r) as usize];
            s.is_finite().then_some(s)
        };
        if let (Some(l), Some(rr)) = (at(dx - 1, dy), at(dx + 1, dy)) {
            sx = parabola_offset(l, score, rr);
        }
        if let (Some(t), Some(b)) = (at(dx, dy - 1), at(dx, dy + 1)) {
            sy = parabola_offset(t, score, b);
        }
    }
    Some([pos[0] + dx as f64 + sx, pos[1] + dy as f64 + sy])
}

/// Track every masked pixel with valid frame-0 depth through the sequence
/// (row-major order, matching [`crate::geometry::unproject`]).
///
/// A point whose best match falls below `min_zncc` is reported invisible
/// for that frame and keeps its last position; tracking resumes from there.
pub fn block_match_tracks(
    frames: &[RgbdFrame],
    mask: &PartMask,
    cfg: &BlockMatchConfig,
) -> Result<TrackSet, FlowError> {
    cfg.validate()?;
    let first = frames.first().ok_or(FlowError::FrameCountMismatch { expected: 1, got: 0 })?;
    if mask.width() != first.width || mask.height() != first.height {
        return Err(FlowError::ShapeMismatch("mask does not match frame size".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.width != first.width || f.height != first.height) {
        return Err(FlowError::ShapeMismatch(format!("frame is {}x{}", f.width, f.height)));
    }
    let grays: Vec<Vec<f32>> = frames.iter().map(|f| f.gray()).collect();
    let views: Vec<Gray> = grays
        .iter()
        .map(|g| Gray { w: first.width as i64, h: first.height as i64, px: g })
        .collect();

    let mut seeds = Vec::new();
    for v in 0..first.height {
        for u in 0..first.width {
            if mask.get(u, v) && first.valid[first.index(u, v)] {
                seeds.push([u as f64, v as f64]);
            }
        }
    }
    let n_frames = frames.len();
    let rows = exec::map_slice(&seeds, |&start| {
        let mut pos = start;
        let mut row = Vec::with_capacity(n_frames);
        row.push((pos, true));
        for n in 1..n_frames {
            match match_step(&views[n - 1], &views[n], pos, cfg) {
                Some(p) => {
                    pos = p;
                    row.push((pos, true));
                }
                None => row.push((pos, false)),
            }
        }
        row
    });
    let mut positions = Vec::with_capacity(seeds.len() * n_frames);
    let mut visible = Vec::with_capacity(seeds.len() * n_frames);
    for row in rows {
        for (p, vis) in row {
            positions.push(p);
            visible.push(vis);
        }
    }
    TrackSet::new(seeds.len(), n_frames, positions, visible)
}
