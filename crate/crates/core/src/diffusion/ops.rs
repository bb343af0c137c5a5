//! Dense f64 activations laid out `[frame][channel][row][col]` and the layer
//! primitives of the denoiser, each with its backward pass.

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { frames, channels, height, width, data: vec![0.0; frames * channels * height * width] }
    }

    pub fn zeros_like(other: &Act) -> Self {
        Self::zeros(other.frames, other.channels, other.height, other.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let o = (n * self.channels + c) * p;
        &self.data[o..o + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let o = (n * self.channels + c) * p;
        &mut self.data[o..o + p]
    }
}

/// Valid output range for a shift `d ∈ {−1, 0, 1}` over a length `len` axis.
#[inline]
fn span(d: isize, len: usize) -> (usize, usize) {
    (if d < 0 { 1 } else { 0 }, if d > 0 { len - 1 } else { len })
}

/// `dst[y][x] += w · src[y+dy][x+dx]` for in-range pixels.
#[inline]
fn gather_axpy(dst: &mut [f64], src: &[f64], w: f64, dy: isize, dx: isize, h: usize, wd: usize) {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, wd);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * wd + x0..y * wd + x1];
        let s = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// `dst[y+dy][x+dx] += w · src[y][x]`.
#[inline]
fn scatter_axpy(dst: &mut [f64], src: &[f64], w: f64, dy: isize, dx: isize, h: usize, wd: usize) {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, wd);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        let s = &src[y * wd + x0..y * wd + x1];
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// `Σ a[y][x] · b[y+dy][x+dx]`.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, h: usize, wd: usize) -> f64 {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, wd);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ra = &a[y * wd + x0..y * wd + x1];
        let rb = &b[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        acc += ra.iter().zip(rb).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// Per-frame 3×3 convolution, zero padding. Weights `[cout][cin][3][3]`.
pub fn conv3x3(x: &Act, w: &[f64], b: &[f64], cout: usize) -> Act {
    let (h, wd, cin) = (x.height, x.width, x.channels);
    let mut y = Act::zeros(x.frames, cout, h, wd);
    for n in 0..x.frames {
        for co in 0..cout {
            let out = y.plane_mut(n, co);
            out.fill(b[co]);
            for ci in 0..cin {
                let src = x.plane(n, ci);
                let k = &w[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for (t, &wv) in k.iter().enumerate() {
                    gather_axpy(out, src, wv, t as isize / 3 - 1, t as isize % 3 - 1, h, wd);
                }
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn conv3x3_backward(x: &Act, w: &[f64], gy: &Act, gw: &mut [f64], gb: &mut [f64], need_gx: bool) -> Option<Act> {
    let (h, wd, cin, cout) = (x.height, x.width, x.channels, gy.channels);
    let mut gx = need_gx.then(|| Act::zeros_like(x));
    for n in 0..x.frames {
        for co in 0..cout {
            let g = gy.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (co * cin + ci) * 9;
                let src = x.plane(n, ci);
                for t in 0..9 {
                    let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                    gw[base + t] += shifted_dot(g, src, dy, dx, h, wd);
                    if let Some(gx) = gx.as_mut() {
                        scatter_axpy(gx.plane_mut(n, ci), g, w[base + t], dy, dx, h, wd);
                    }
                }
            }
        }
    }
    gx
}

/// Kernel-3 convolution over frames at every pixel, zero padding at both
/// ends of the clip. Weights `[tap][cout][cin]`, tap 0 looks one frame back.
pub fn temporal3(x: &Act, w: &[f64], b: &[f64], cout: usize) -> Act {
    let (frames, cin) = (x.frames, x.channels);
    let mut y = Act::zeros(frames, cout, x.height, x.width);
    for n in 0..frames {
        for co in 0..cout {
            let out = y.plane_mut(n, co);
            out.fill(b[co]);
            for tap in 0..3 {
                let m = n as isize + tap as isize - 1;
                if m < 0 || m >= frames as isize {
                    continue;
                }
                for ci in 0..cin {
                    let wv = w[(tap * cout + co) * cin + ci];
                    for (a, s) in out.iter_mut().zip(x.plane(m as usize, ci)) {
                        *a += wv * s;
                    }
                }
            }
        }
    }
    y
}

pub fn temporal3_backward(x: &Act, w: &[f64], gy: &Act, gw: &mut [f64], gb: &mut [f64]) -> Act {
    let (frames, cin, cout) = (x.frames, x.channels, gy.channels);
    let mut gx = Act::zeros_like(x);
    for n in 0..frames {
        for co in 0..cout {
            let g = gy.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for tap in 0..3 {
                let m = n as isize + tap as isize - 1;
                if m < 0 || m >= frames as isize {
                    continue;
                }
                let m = m as usize;
                for ci in 0..cin {
                    let i = (tap * cout + co) * cin + ci;
                    gw[i] += g.iter().zip(x.plane(m, ci)).map(|(p, q)| p * q).sum::<f64>();
                    let wv = w[i];
                    for (a, s) in gx.plane_mut(m, ci).iter_mut().zip(g) {
                        *a += wv * s;
                    }
                }
            }
        }
    }
    gx
}

/// Pointwise channel mix. Weights `[cout][cin]`.
pub fn conv1x1(x: &Act, w: &[f64], b: &[f64], cout: usize) -> Act {
    let cin = x.channels;
    let mut y = Act::zeros(x.frames, cout, x.height, x.width);
    for n in 0..x.frames {
        for co in 0..cout {
            let out = y.plane_mut(n, co);
            out.fill(b[co]);
            for ci in 0..cin {
                let wv = w[co * cin + ci];
                for (a, s) in out.iter_mut().zip(x.plane(n, ci)) {
                    *a += wv * s;
                }
            }
        }
    }
    y
}

pub fn conv1x1_backward(x: &Act, w: &[f64], gy: &Act, gw: &mut [f64], gb: &mut [f64]) -> Act {
    let (cin, cout) = (x.channels, gy.channels);
    let mut gx = Act::zeros_like(x);
    for n in 0..x.frames {
        for co in 0..cout {
            let g = gy.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let i = co * cin + ci;
                gw[i] += g.iter().zip(x.plane(n, ci)).map(|(p, q)| p * q).sum::<f64>();
                let wv = w[i];
                for (a, s) in gx.plane_mut(n, ci).iter_mut().zip(g) {
                    *a += wv * s;
                }
            }
        }
    }
    gx
}

/// Adds `v[c]` to every pixel of channel `c` in every frame.
pub fn add_channel(x: &mut Act, v: &[f64]) {
    for n in 0..x.frames {
        for (c, &vc) in v.iter().enumerate() {
            x.plane_mut(n, c).iter_mut().for_each(|a| *a += vc);
        }
    }
}

pub fn channel_sums(g: &Act) -> Vec<f64> {
    let mut s = vec![0.0; g.channels];
    for n in 0..g.frames {
        for (c, acc) in s.iter_mut().enumerate() {
            *acc += g.plane(n, c).iter().sum::<f64>();
        }
    }
    s
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub fn silu(x: &Act) -> Act {
    Act { data: x.data.iter().map(|&a| a * sigmoid(a)).collect(), ..x.clone_shape() }
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward(pre: &Act, gy: &Act) -> Act {
    let data = pre
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&a, &g)| {
            let s = sigmoid(a);
            g * s * (1.0 + a * (1.0 - s))
        })
        .collect();
    Act { data, ..pre.clone_shape() }
}

impl Act {
    fn clone_shape(&self) -> Act {
        Act { frames: self.frames, channels: self.channels, height: self.height, width: self.width, data: Vec::new() }
    }
}

pub fn avgpool2(x: &Act) -> Act {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut y = Act::zeros(x.frames, x.channels, h, w);
    for n in 0..x.frames {
        for c in 0..x.channels {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for r in 0..h {
                for q in 0..w {
                    let i = 2 * r * x.width + 2 * q;
                    dst[r * w + q] = 0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
                }
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: &Act, height: usize, width: usize) -> Act {
    let mut gx = Act::zeros(gy.frames, gy.channels, height, width);
    for n in 0..gy.frames {
        for c in 0..gy.channels {
            let g = gy.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for r in 0..height {
                for q in 0..width {
                    dst[r * width + q] = 0.25 * g[(r / 2) * gy.width + q / 2];
                }
            }
        }
    }
    gx
}

pub fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut y = Act::zeros(x.frames, x.channels, h, w);
    for n in 0..x.frames {
        for c in 0..x.channels {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for r in 0..h {
                for q in 0..w {
                    dst[r * w + q] = src[(r / 2) * x.width + q / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Act) -> Act {
    let (h, w) = (gy.height / 2, gy.width / 2);
    let mut gx = Act::zeros(gy.frames, gy.channels, h, w);
    for n in 0..gy.frames {
        for c in 0..gy.channels {
            let g = gy.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for r in 0..gy.height {
                for q in 0..gy.width {
                    dst[(r / 2) * w + q / 2] += g[r * gy.width + q];
                }
            }
        }
    }
    gx
}

/// Channel concatenation `[a, b]` per frame.
pub fn concat(a: &Act, b: &Act) -> Act {
    let mut y = Act::zeros(a.frames, a.channels + b.channels, a.height, a.width);
    for n in 0..a.frames {
        for c in 0..a.channels {
            y.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.channels {
            y.plane_mut(n, a.channels + c).copy_from_slice(b.plane(n, c));
        }
    }
    y
}

pub fn split(g: &Act, first: usize) -> (Act, Act) {
    let mut a = Act::zeros(g.frames, first, g.height, g.width);
    let mut b = Act::zeros(g.frames, g.channels - first, g.height, g.width);
    for n in 0..g.frames {
        for c in 0..g.channels {
            if c < first {
                a.plane_mut(n, c).copy_from_slice(g.plane(n, c));
            } else {
                b.plane_mut(n, c - first).copy_from_slice(g.plane(n, c));
            }
        }
    }
    (a, b)
}
