//! Toy RGBD video diffusion: a factorized spatio-temporal U-Net predicts the
//! noise in a corrupted clip of `N` future frames, conditioned on the current
//! observation (concatenated to every frame), a task id and the step `k`.
//!
//! Two formulations are available. [`NoiseMode::Literal`] corrupts with
//! `√(1−β_k)·x + √β_k·ε` and samples by repeatedly subtracting the predicted
//! noise. [`NoiseMode::Standard`] is the usual cumulative DDPM corruption with
//! the ancestral sampler.

mod ops;
mod unet;

use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::geometry::RgbdFrame;
use crate::rng::{self, SeededRng};
use crate::simulator::{generate_scene, random_scene, MotionStyle, SceneParams, TASK_NAMES};

pub use ops::Act;
pub use unet::{step_embedding, ForwardCache, ParamBlock, UNet, UNetConfig};

/// r, g, b, normalized depth.
pub const VIDEO_CHANNELS: usize = 4;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss for batch item {item}")]
    NonFiniteLoss { item: usize },
    #[error("non-finite sample at denoising step {step}")]
    NonFiniteSample { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scene generation failed: {0}")]
    Scene(String),
}

/// `frames × 4 × H × W` clip, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl VideoTensor {
    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self { height, width, frames, data: vec![0.0; height * width * VIDEO_CHANNELS * frames] }
    }

    pub fn standard_normal<R: Rng>(height: usize, width: usize, frames: usize, rng: &mut R) -> Self {
        let mut v = Self::zeros(height, width, frames);
        v.data.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &VideoTensor) -> bool {
        (self.height, self.width, self.frames) == (other.height, other.width, other.frames)
    }

    pub fn plane(&self, frame: usize, channel: usize) -> &[f64] {
        let p = self.height * self.width;
        let o = (frame * VIDEO_CHANNELS + channel) * p;
        &self.data[o..o + p]
    }

    pub fn get(&self, frame: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.plane(frame, channel)[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn from_act(a: Act) -> Self {
        Self { height: a.height, width: a.width, frames: a.frames, data: a.data }
    }

    fn to_act(&self) -> Act {
        Act { frames: self.frames, channels: VIDEO_CHANNELS, height: self.height, width: self.width, data: self.data.clone() }
    }

    /// Pack RGBD frames; depth is mapped from `depth_range` onto `[0, 1]`
    /// and invalid pixels read as 0.
    pub fn from_frames(frames: &[RgbdFrame], depth_range: (f64, f64)) -> Result<Self, DiffusionError> {
        let first = frames.first().ok_or_else(|| DiffusionError::ShapeMismatch("no frames".into()))?;
        let (h, w) = (first.height as usize, first.width as usize);
        let mut v = Self::zeros(h, w, frames.len());
        let p = h * w;
        for (n, f) in frames.iter().enumerate() {
            if (f.height as usize, f.width as usize) != (h, w) {
                return Err(DiffusionError::ShapeMismatch("frames differ in size".into()));
            }
            let base = n * VIDEO_CHANNELS * p;
            for i in 0..p {
                for c in 0..3 {
                    v.data[base + c * p + i] = f.rgb[i][c] as f64;
                }
                v.data[base + 3 * p + i] = if f.valid[i] { normalize_depth(f.depth[i] as f64, depth_range) } else { 0.0 };
            }
        }
        Ok(v)
    }

    /// Inverse of [`from_frames`](Self::from_frames), clamping to the data range.
    pub fn to_frames(&self, depth_range: (f64, f64)) -> Vec<RgbdFrame> {
        let p = self.height * self.width;
        (0..self.frames)
            .map(|n| {
                let mut f = RgbdFrame::blank(self.width as u32, self.height as u32);
                let base = n * VIDEO_CHANNELS * p;
                for i in 0..p {
                    for c in 0..3 {
                        f.rgb[i][c] = self.data[base + c * p + i].clamp(0.0, 1.0) as f32;
                    }
                    let d = self.data[base + 3 * p + i].clamp(0.0, 1.0);
                    let z = depth_range.0 + d * (depth_range.1 - depth_range.0);
                    if d > 0.0 && z > 0.0 {
                        f.depth[i] = z as f32;
                        f.valid[i] = true;
                    }
                }
                f
            })
            .collect()
    }
}

fn normalize_depth(d: f64, range: (f64, f64)) -> f64 {
    ((d - range.0) / (range.1 - range.0)).clamp(0.0, 1.0)
}

/// Conditioning frame `O`, `4 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; VIDEO_CHANNELS * height * width] }
    }

    pub fn from_frame(frame: &RgbdFrame, depth_range: (f64, f64)) -> Self {
        let v = VideoTensor::from_frames(std::slice::from_ref(frame), depth_range).expect("one frame");
        Self { height: v.height, width: v.width, data: v.data }
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[channel * p..(channel + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidConfig("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        Ok(Self { betas })
    }

    /// `K` betas evenly spaced from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self, DiffusionError> {
        let betas = (0..steps)
            .map(|j| if steps == 1 { start } else { start + (end - start) * j as f64 / (steps - 1) as f64 })
            .collect();
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_k` for `k ∈ 1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// `ᾱ_k = Π_{j≤k} (1 − β_j)`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.betas[..k].iter().map(|b| 1.0 - b).product()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseMode {
    #[default]
    #[serde(rename = "paper-literal")]
    Literal,
    #[serde(rename = "standard")]
    Standard,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Literal => "paper-literal",
            NoiseMode::Standard => "standard",
        }
    }
}

impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper-literal" | "literal" => Ok(NoiseMode::Literal),
            "standard" | "ddpm" => Ok(NoiseMode::Standard),
            _ => Err(format!("unknown sampler mode {s:?} (expected paper-literal or standard)")),
        }
    }
}

/// Signal and noise coefficients of the corruption at step `k`.
pub fn noise_coefficients(k: usize, schedule: &NoiseSchedule, mode: NoiseMode) -> (f64, f64) {
    match mode {
        NoiseMode::Literal => {
            let b = schedule.beta(k);
            ((1.0 - b).sqrt(), b.sqrt())
        }
        NoiseMode::Standard => {
            let a = schedule.alpha_bar(k);
            (a.sqrt(), (1.0 - a).sqrt())
        }
    }
}

pub fn add_noise(
    clean: &VideoTensor,
    eps: &VideoTensor,
    k: usize,
    schedule: &NoiseSchedule,
    mode: NoiseMode,
) -> Result<VideoTensor, DiffusionError> {
    if !clean.same_shape(eps) {
        return Err(DiffusionError::ShapeMismatch("clean and noise shapes differ".into()));
    }
    if k == 0 || k > schedule.steps() {
        return Err(DiffusionError::InvalidConfig(format!("step {k} outside 1..={}", schedule.steps())));
    }
    let (s, n) = noise_coefficients(k, schedule, mode);
    let data = clean.data.iter().zip(&eps.data).map(|(c, e)| s * c + n * e).collect();
    Ok(VideoTensor { height: clean.height, width: clean.width, frames: clean.frames, data })
}

/// Anything that predicts the noise in a corrupted clip.
pub trait Denoiser: Sync {
    /// `(height, width, frames)` of the clips it handles.
    fn shape(&self) -> (usize, usize, usize);

    fn predict(&self, noisy: &VideoTensor, obs: &Observation, task: usize, k: usize) -> Result<VideoTensor, DiffusionError>;
}

impl Denoiser for UNet {
    fn shape(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.height, c.width, c.frames)
    }

    fn predict(&self, noisy: &VideoTensor, obs: &Observation, task: usize, k: usize) -> Result<VideoTensor, DiffusionError> {
        self.forward(noisy, obs, task, k)
    }
}

/// Recovers the exact noise of a corruption of `clean`.
pub struct OracleDenoiser<'a> {
    pub clean: &'a VideoTensor,
    pub schedule: &'a NoiseSchedule,
    pub mode: NoiseMode,
}

impl Denoiser for OracleDenoiser<'_> {
    fn shape(&self) -> (usize, usize, usize) {
        (self.clean.height, self.clean.width, self.clean.frames)
    }

    fn predict(&self, noisy: &VideoTensor, _obs: &Observation, _task: usize, k: usize) -> Result<VideoTensor, DiffusionError> {
        let (s, n) = noise_coefficients(k, self.schedule, self.mode);
        let data = noisy.data.iter().zip(&self.clean.data).map(|(x, c)| (x - s * c) / n).collect();
        Ok(VideoTensor { data, ..noisy.clone() })
    }
}

/// One training example: `N` future frames after `observation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: VideoTensor,
    pub observation: Observation,
    pub task: usize,
}

/// A clip with its sampled step and noise.
#[derive(Debug, Clone)]
pub struct NoisedItem<'a> {
    pub clip: &'a Clip,
    pub k: usize,
    pub eps: VideoTensor,
}

fn mse(a: &VideoTensor, b: &VideoTensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean over items of the per-item noise MSE.
pub fn batch_loss(
    denoiser: &dyn Denoiser,
    items: &[NoisedItem],
    schedule: &NoiseSchedule,
    mode: NoiseMode,
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let noisy = add_noise(&it.clip.video, &it.eps, it.k, schedule, mode)?;
        let pred = denoiser.predict(&noisy, &it.clip.observation, it.clip.task, it.k)?;
        let l = mse(&pred, &it.eps);
        if !l.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { item: i });
        }
        total += l;
    }
    Ok(total / items.len() as f64)
}

/// Loss and its gradient. Items run under `exec`; the reduction is always
/// sequential in item order.
pub fn loss_and_grad(
    net: &UNet,
    items: &[NoisedItem],
    schedule: &NoiseSchedule,
    mode: NoiseMode,
    exec_mode: Execution,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    if items.is_empty() {
        return Err(DiffusionError::InvalidConfig("empty batch".into()));
    }
    let b = items.len() as f64;
    let per_item = exec::map_indexed_with(exec_mode, items.len(), |i| -> Result<(f64, Vec<f64>), DiffusionError> {
        let it = &items[i];
        let noisy = add_noise(&it.clip.video, &it.eps, it.k, schedule, mode)?;
        let (pred, cache) = net.forward_cached(&noisy, &it.clip.observation, it.clip.task, it.k)?;
        let l = mse(&pred, &it.eps);
        if !l.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { item: i });
        }
        let scale = 2.0 / (pred.len() as f64 * b);
        let g = VideoTensor { data: pred.data.iter().zip(&it.eps.data).map(|(p, e)| scale * (p - e)).collect(), ..pred };
        Ok((l, net.backward(&cache, &g)))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for r in per_item {
        let (l, g) = r?;
        loss += l;
        for (a, x) in grad.iter_mut().zip(&g) {
            *a += x;
        }
    }
    Ok((loss / b, grad))
}

/// Draw `k ~ U[1, K]` and `ε ~ N(0, I)` for each clip, in order.
pub fn draw_noise<'a, R: Rng>(batch: &[&'a Clip], schedule: &NoiseSchedule, rng: &mut R) -> Vec<NoisedItem<'a>> {
    batch
        .iter()
        .map(|c| {
            let k = rng.random_range(1..=schedule.steps());
            let eps = VideoTensor::standard_normal(c.video.height, c.video.width, c.video.frames, rng);
            NoisedItem { clip: c, k, eps }
        })
        .collect()
}

pub fn train_step<R: Rng>(
    net: &UNet,
    batch: &[&Clip],
    schedule: &NoiseSchedule,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    let items = draw_noise(batch, schedule, rng);
    loss_and_grad(net, &items, schedule, mode, Execution::Parallel)
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Self {
        Self { lr, momentum, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mode: NoiseMode,
    /// Window of the running mean used to report smoothed loss.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, lr: 1e-3, momentum: 0.9, seed: 0, mode: NoiseMode::Literal, smoothing_window: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl TrainReport {
    fn new(losses: Vec<f64>, window: usize) -> Self {
        let w = window.max(1);
        let smoothed = (0..losses.len())
            .map(|i| {
                let s = &losses[(i + 1).saturating_sub(w)..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        Self { losses, smoothed }
    }

    /// Mean of the first window.
    pub fn initial_loss(&self, window: usize) -> f64 {
        let s = &self.losses[..window.min(self.losses.len()).max(1)];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn final_loss(&self) -> f64 {
        *self.smoothed.last().unwrap_or(&f64::NAN)
    }
}

/// Minibatch SGD over shuffled epochs of `clips`.
pub fn train(
    net: &mut UNet,
    clips: &[Clip],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    exec_mode: Execution,
) -> Result<TrainReport, DiffusionError> {
    if clips.is_empty() || cfg.batch_size == 0 {
        return Err(DiffusionError::InvalidConfig("need clips and a positive batch size".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, net.num_params());
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&clips[order.pop().unwrap()]);
        }
        let items = draw_noise(&batch, schedule, &mut rng);
        let (loss, grad) = loss_and_grad(net, &items, schedule, cfg.mode, exec_mode)?;
        opt.step(net.params_mut(), &grad);
        if step % 50 == 0 {
            log::debug!("train step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok(TrainReport::new(losses, cfg.smoothing_window))
}

/// Denoise from `Î^K ~ N(0, I)` down to `Î^0`.
pub fn sample_video(
    denoiser: &dyn Denoiser,
    obs: &Observation,
    task: usize,
    schedule: &NoiseSchedule,
    mode: NoiseMode,
    rng: &mut SeededRng,
) -> Result<VideoTensor, DiffusionError> {
    let (h, w, n) = denoiser.shape();
    let mut x = VideoTensor::standard_normal(h, w, n, rng);
    for k in (1..=schedule.steps()).rev() {
        let eps = denoiser.predict(&x, obs, task, k)?;
        match mode {
            NoiseMode::Literal => {
                for (a, e) in x.data.iter_mut().zip(&eps.data) {
                    *a -= e;
                }
            }
            NoiseMode::Standard => {
                let beta = schedule.beta(k);
                let (ab, ab_prev) = (schedule.alpha_bar(k), schedule.alpha_bar(k - 1));
                let c = beta / (1.0 - ab).sqrt();
                let inv = 1.0 / (1.0 - beta).sqrt();
                let sigma = if k > 1 { (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() } else { 0.0 };
                for (a, e) in x.data.iter_mut().zip(&eps.data) {
                    *a = inv * (*a - c * e);
                    if sigma > 0.0 {
                        *a += sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(DiffusionError::NonFiniteSample { step: k });
        }
    }
    Ok(x)
}

/// Mean over pixels of the Euclidean RGBD distance to the closest clip.
pub fn nearest_clip_distance(sample: &VideoTensor, clips: &[Clip]) -> f64 {
    let p = sample.height * sample.width;
    let per_pixel = |c: &VideoTensor| {
        let mut total = 0.0;
        for n in 0..sample.frames {
            for i in 0..p {
                let d2: f64 = (0..VIDEO_CHANNELS)
                    .map(|ch| {
                        let d = sample.plane(n, ch)[i] - c.plane(n, ch)[i];
                        d * d
                    })
                    .sum();
                total += d2.sqrt();
            }
        }
        total / (p * sample.frames) as f64
    };
    clips.iter().map(|c| per_pixel(&c.video)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Metric depth mapped onto `[0, 1]`.
    pub depth_range: (f64, f64),
    pub part_distance: (f64, f64),
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { height: 16, width: 16, frames: 4, depth_range: (0.0, 1.5), part_distance: (0.3, 0.4) }
    }
}

/// Rendered training clips, task ids cycling through the task set.
pub fn simulator_clips(count: usize, seed: u64, cfg: &ClipConfig) -> Result<Vec<Clip>, DiffusionError> {
    let gen = |i: usize| -> Result<Clip, DiffusionError> {
        let task = i % TASK_NAMES.len();
        let params = SceneParams {
            width: cfg.width as u32,
            height: cfg.height as u32,
            num_steps: cfg.frames,
            part_distance: cfg.part_distance,
            motion: MotionStyle::Task(task as u32),
            ..Default::default()
        };
        let scene = random_scene(rng::derive_seed(seed, i as u64), &params);
        let (frames, _) = generate_scene(&scene).map_err(|e| DiffusionError::Scene(e.to_string()))?;
        Ok(Clip {
            video: VideoTensor::from_frames(&frames[1..], cfg.depth_range)?,
            observation: Observation::from_frame(&frames[0], cfg.depth_range),
            task,
        })
    };
    exec::map_indexed(count, gen).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Everything besides the weights that a checkpoint records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: UNetConfig,
    pub schedule: ScheduleConfig,
    pub mode: NoiseMode,
    pub depth_range: (f64, f64),
    pub task_names: Vec<String>,
    #[serde(default)]
    pub run: serde_json::Value,
}

/// `"DNSR"`, u32 version, u32 manifest length, manifest JSON, u32 weight
/// count, f32 weights in declaration order.
pub fn write_checkpoint<W: Write>(w: &mut W, manifest: &ModelManifest, net: &UNet) -> Result<(), DiffusionError> {
    if manifest.arch != *net.config() {
        return Err(DiffusionError::Checkpoint("manifest architecture differs from the network".into()));
    }
    let json = serde_json::to_vec(manifest).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
    w.write_all(b"DNSR")?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(net.num_params() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(net.num_params() * 4);
    for p in net.params() {
        buf.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelManifest, UNet), DiffusionError> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != b"DNSR" {
        return Err(DiffusionError::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&word))));
    }
    let mut u32_le = |r: &mut R| -> Result<u32, DiffusionError> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = u32_le(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffusionError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32_le(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: ModelManifest = serde_json::from_slice(&json).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
    let count = u32_le(r)? as usize;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let net = UNet::from_params(manifest.arch, params)?;
    Ok((manifest, net))
}

/// Analytic vs finite-difference derivative of `‖G(x)‖²` for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn passes(&self, rel: f64, abs_floor: f64) -> bool {
        (self.analytic - self.numeric).abs() <= rel * self.analytic.abs().max(self.numeric.abs()) + abs_floor
    }
}

pub fn gradient_check(
    net: &UNet,
    noisy: &VideoTensor,
    obs: &Observation,
    task: usize,
    k: usize,
    indices: &[usize],
    h: f64,
) -> Result<Vec<GradCheckEntry>, DiffusionError> {
    let objective = |n: &UNet| -> Result<f64, DiffusionError> {
        Ok(n.forward(noisy, obs, task, k)?.data.iter().map(|v| v * v).sum())
    };
    let (out, cache) = net.forward_cached(noisy, obs, task, k)?;
    let g_out = VideoTensor { data: out.data.iter().map(|v| 2.0 * v).collect(), ..out };
    let grad = net.backward(&cache, &g_out);
    let results = exec::map_slice(indices, |&i| -> Result<GradCheckEntry, DiffusionError> {
        let mut probe = net.clone();
        let x0 = probe.params()[i];
        let mut at = |d: f64| {
            probe.params_mut()[i] = x0 + d;
            objective(&probe)
        };
        // Five-point stencil, O(h⁴) truncation error.
        let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        let block = net.blocks().iter().find(|b| b.range().contains(&i)).map(|b| b.name.clone()).unwrap_or_default();
        Ok(GradCheckEntry { index: i, block, analytic: grad[i], numeric })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests;
