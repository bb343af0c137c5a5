//! Factorized spatio-temporal U-Net. Every block runs a 3×3 spatial
//! convolution (plus the conditioning embedding), SiLU, a kernel-3 temporal
//! convolution, SiLU. The encoder halves resolution `depth` times and the
//! decoder mirrors it with skip connections.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{self, Act};
use super::{DiffusionError, Observation, VideoTensor, VIDEO_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub base_channels: usize,
    /// Number of downsample (and upsample) stages.
    pub depth: usize,
    pub embed_dim: usize,
    pub num_tasks: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { height: 16, width: 16, frames: 4, base_channels: 16, depth: 2, embed_dim: 16, num_tasks: 4 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let f = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!("{}x{} is not divisible by 2^{}", self.height, self.width, self.depth));
        }
        if self.frames == 0 || self.base_channels == 0 || self.num_tasks == 0 {
            return bad("frames, base_channels and num_tasks must be positive".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        Ok(())
    }

    fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// `(cin, cout)` of every block: encoder, middle, decoder (deepest first).
    fn block_channels(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.depth {
            let cin = if l == 0 { self.base_channels } else { self.level_channels(l - 1) };
            out.push((format!("down{l}"), cin, self.level_channels(l)));
        }
        let mid = self.level_channels(self.depth - 1);
        out.push(("mid".into(), mid, mid));
        let mut prev = mid;
        for l in (0..self.depth).rev() {
            let c = self.level_channels(l);
            out.push((format!("up{l}"), prev + c, c));
            prev = c;
        }
        out
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    cout: usize,
    spatial_w: usize,
    spatial_b: usize,
    embed_w: usize,
    temporal_w: usize,
    temporal_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<ParamBlock>,
    task_table: usize,
    in_w: usize,
    in_b: usize,
    net: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
    total: usize,
}

fn layout(cfg: &UNetConfig) -> Layout {
    let mut blocks: Vec<ParamBlock> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        let offset = blocks.last().map_or(0, |b| b.offset + b.len());
        blocks.push(ParamBlock { name, offset, shape });
        blocks.len() - 1
    };
    let e = cfg.embed_dim;
    let c0 = cfg.base_channels;
    let task_table = add("task_table".into(), vec![cfg.num_tasks, e]);
    let in_w = add("in.spatial.w".into(), vec![c0, 2 * VIDEO_CHANNELS, 3, 3]);
    let in_b = add("in.spatial.b".into(), vec![c0]);
    let mut net = Vec::new();
    for (name, cin, cout) in cfg.block_channels() {
        net.push(BlockIdx {
            cout,
            spatial_w: add(format!("{name}.spatial.w"), vec![cout, cin, 3, 3]),
            spatial_b: add(format!("{name}.spatial.b"), vec![cout]),
            embed_w: add(format!("{name}.embed.w"), vec![cout, e]),
            temporal_w: add(format!("{name}.temporal.w"), vec![3, cout, cout]),
            temporal_b: add(format!("{name}.temporal.b"), vec![cout]),
        });
    }
    let head_w = add("head.w".into(), vec![VIDEO_CHANNELS, c0]);
    let head_b = add("head.b".into(), vec![VIDEO_CHANNELS]);
    let total = blocks.last().map_or(0, |b| b.offset + b.len());
    Layout { blocks, task_table, in_w, in_b, net, head_w, head_b, total }
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (k as f64 * freq).sin();
        out[2 * i + 1] = (k as f64 * freq).cos();
    }
    out
}

struct BlockCache {
    input: Act,
    pre1: Act,
    act1: Act,
    pre2: Act,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    input: Act,
    emb: Vec<f64>,
    task: usize,
    blocks: Vec<BlockCache>,
    /// Channel count of the upsampled tensor entering each decoder block.
    up_split: Vec<usize>,
    head_in: Act,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<f64>,
    layout_blocks: Vec<ParamBlock>,
}

impl UNet {
    pub fn zeros(config: UNetConfig) -> Result<Self, DiffusionError> {
        config.validate()?;
        let l = layout(&config);
        Ok(Self { config, params: vec![0.0; l.total], layout_blocks: l.blocks })
    }

    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn random<R: Rng>(config: UNetConfig, rng: &mut R) -> Result<Self, DiffusionError> {
        let mut net = Self::zeros(config)?;
        for b in net.layout_blocks.clone() {
            let std = if b.name.ends_with(".b") {
                0.0
            } else if b.name == "task_table" {
                0.5
            } else {
                let fan_in: usize = b.shape[1..].iter().product::<usize>()
                    * if b.name.ends_with("temporal.w") { b.shape[0] } else { 1 };
                let gain = if b.name.starts_with("head") || b.name.ends_with("embed.w") { 1.0 } else { 2.0 };
                (gain / fan_in as f64).sqrt()
            };
            for p in &mut net.params[b.range()] {
                *p = if std == 0.0 { 0.0 } else { std * rng.sample::<f64, _>(StandardNormal) };
            }
        }
        Ok(net)
    }

    pub fn from_params(config: UNetConfig, params: Vec<f64>) -> Result<Self, DiffusionError> {
        let mut net = Self::zeros(config)?;
        if params.len() != net.params.len() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(DiffusionError::InvalidConfig(format!("parameter {i} is not finite")));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter blocks in declaration order.
    pub fn blocks(&self) -> &[ParamBlock] {
        &self.layout_blocks
    }

    fn check_inputs(&self, noisy: &VideoTensor, obs: &Observation, task: usize) -> Result<(), DiffusionError> {
        let c = &self.config;
        if (noisy.height, noisy.width, noisy.frames) != (c.height, c.width, c.frames) {
            return Err(DiffusionError::ShapeMismatch(format!(
                "video is {}x{}x{}, model expects {}x{}x{}",
                noisy.height, noisy.width, noisy.frames, c.height, c.width, c.frames
            )));
        }
        if (obs.height, obs.width) != (c.height, c.width) {
            return Err(DiffusionError::ShapeMismatch(format!(
                "observation is {}x{}, model expects {}x{}",
                obs.height, obs.width, c.height, c.width
            )));
        }
        if task >= c.num_tasks {
            return Err(DiffusionError::ShapeMismatch(format!("task {task} out of range 0..{}", c.num_tasks)));
        }
        Ok(())
    }

    pub fn forward(&self, noisy: &VideoTensor, obs: &Observation, task: usize, k: usize) -> Result<VideoTensor, DiffusionError> {
        Ok(self.forward_cached(noisy, obs, task, k)?.0)
    }

    pub fn forward_cached(
        &self,
        noisy: &VideoTensor,
        obs: &Observation,
        task: usize,
        k: usize,
    ) -> Result<(VideoTensor, ForwardCache), DiffusionError> {
        self.check_inputs(noisy, obs, task)?;
        let cfg = &self.config;
        let l = layout(cfg);
        let p = &self.params;
        let blk = |i: usize| &p[l.blocks[i].range()];

        let e = cfg.embed_dim;
        let mut emb = step_embedding(k, e);
        for (a, t) in emb.iter_mut().zip(&blk(l.task_table)[task * e..(task + 1) * e]) {
            *a += t;
        }

        let mut input = Act::zeros(cfg.frames, 2 * VIDEO_CHANNELS, cfg.height, cfg.width);
        for n in 0..cfg.frames {
            for c in 0..VIDEO_CHANNELS {
                input.plane_mut(n, c).copy_from_slice(noisy.plane(n, c));
                input.plane_mut(n, VIDEO_CHANNELS + c).copy_from_slice(obs.plane(c));
            }
        }

        let mut x = ops::conv3x3(&input, blk(l.in_w), blk(l.in_b), cfg.base_channels);
        let mut caches = Vec::with_capacity(l.net.len());
        let mut skips = Vec::with_capacity(cfg.depth);
        let run = |x: Act, b: &BlockIdx, caches: &mut Vec<BlockCache>| -> Act {
            let mut pre1 = ops::conv3x3(&x, blk(b.spatial_w), blk(b.spatial_b), b.cout);
            let ew = blk(b.embed_w);
            let proj: Vec<f64> = (0..b.cout).map(|c| (0..e).map(|j| ew[c * e + j] * emb[j]).sum()).collect();
            ops::add_channel(&mut pre1, &proj);
            let act1 = ops::silu(&pre1);
            let pre2 = ops::temporal3(&act1, blk(b.temporal_w), blk(b.temporal_b), b.cout);
            let out = ops::silu(&pre2);
            caches.push(BlockCache { input: x, pre1, act1, pre2 });
            out
        };
        for lvl in 0..cfg.depth {
            let h = run(x, &l.net[lvl], &mut caches);
            x = ops::avgpool2(&h);
            skips.push(h);
        }
        x = run(x, &l.net[cfg.depth], &mut caches);
        let mut up_split = Vec::with_capacity(cfg.depth);
        for (j, lvl) in (0..cfg.depth).rev().enumerate() {
            let u = ops::upsample2(&x);
            up_split.push(u.channels);
            let cat = ops::concat(&u, &skips[lvl]);
            x = run(cat, &l.net[cfg.depth + 1 + j], &mut caches);
        }
        let out = ops::conv1x1(&x, blk(l.head_w), blk(l.head_b), VIDEO_CHANNELS);
        let video = VideoTensor::from_act(out);
        Ok((video, ForwardCache { input, emb, task, blocks: caches, up_split, head_in: x }))
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the network output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &VideoTensor) -> Vec<f64> {
        let cfg = &self.config;
        let l = layout(cfg);
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let e = cfg.embed_dim;
        let mut gemb = vec![0.0; e];

        // Disjoint mutable views into `grad` for one layer's weights and bias.
        fn pair<'a>(g: &'a mut [f64], l: &Layout, w: usize, b: usize) -> (&'a mut [f64], &'a mut [f64]) {
            let (rw, rb) = (l.blocks[w].range(), l.blocks[b].range());
            debug_assert_eq!(rw.end, rb.start);
            let (a, rest) = g[rw.start..rb.end].split_at_mut(rw.len());
            (a, rest)
        }

        let gy = grad_out.to_act();
        let gx = {
            let (gw, gb) = pair(&mut grad, &l, l.head_w, l.head_b);
            ops::conv1x1_backward(&cache.head_in, &p[l.blocks[l.head_w].range()], &gy, gw, gb)
        };

        let block_back = |i: usize, g_out: Act, grad: &mut Vec<f64>, gemb: &mut Vec<f64>| -> Act {
            let b = &l.net[i];
            let c = &cache.blocks[i];
            let g_pre2 = ops::silu_backward(&c.pre2, &g_out);
            let g_act1 = {
                let (gw, gb) = pair(grad, &l, b.temporal_w, b.temporal_b);
                ops::temporal3_backward(&c.act1, &p[l.blocks[b.temporal_w].range()], &g_pre2, gw, gb)
            };
            let g_pre1 = ops::silu_backward(&c.pre1, &g_act1);
            let gv = ops::channel_sums(&g_pre1);
            let ew = &p[l.blocks[b.embed_w].range()];
            let gew = &mut grad[l.blocks[b.embed_w].range()];
            for (ch, &g) in gv.iter().enumerate() {
                for j in 0..e {
                    gew[ch * e + j] += g * cache.emb[j];
                    gemb[j] += g * ew[ch * e + j];
                }
            }
            let (gw, gb) = pair(grad, &l, b.spatial_w, b.spatial_b);
            ops::conv3x3_backward(&c.input, &p[l.blocks[b.spatial_w].range()], &g_pre1, gw, gb, true)
                .expect("input gradient requested")
        };

        let depth = cfg.depth;
        let mut g = gx;
        let mut g_skips: Vec<Option<Act>> = (0..depth).map(|_| None).collect();
        for (j, lvl) in (0..depth).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let g_cat = block_back(depth + 1 + j, g, &mut grad, &mut gemb);
            let (g_u, g_skip) = ops::split(&g_cat, cache.up_split[j]);
            g_skips[lvl] = Some(g_skip);
            g = ops::upsample2_backward(&g_u);
        }
        g = block_back(depth, g, &mut grad, &mut gemb);
        for lvl in (0..depth).rev() {
            let skip_in = &cache.blocks[lvl].pre2;
            let mut g_h = ops::avgpool2_backward(&g, skip_in.height, skip_in.width);
            for (a, s) in g_h.data.iter_mut().zip(&g_skips[lvl].take().expect("skip gradient").data) {
                *a += s;
            }
            g = block_back(lvl, g_h, &mut grad, &mut gemb);
        }
        {
            let (gw, gb) = pair(&mut grad, &l, l.in_w, l.in_b);
            ops::conv3x3_backward(&cache.input, &p[l.blocks[l.in_w].range()], &g, gw, gb, false);
        }
        let gt = &mut grad[l.blocks[l.task_table].range()];
        for j in 0..e {
            gt[cache.task * e + j] += gemb[j];
        }
        grad
    }
}
