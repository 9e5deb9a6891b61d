//! Three-layer convolutional network with exact reverse-mode gradients.
//!
//! Activations are stored channel-major (`c * h * w + y * w + x`). Both 3×3
//! convolutions use zero padding of one pixel, so spatial dims are preserved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ForegroundProbMap, Grid2D};
use crate::ordinal::{aggregate_foreground, OrdinalProbMap};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// One logit per voxel, squashed by a sigmoid.
    Sigmoid,
    /// `K + 1` logits per voxel, normalized by a softmax over consensus levels.
    Ordinal { num_raters: usize },
}

impl Head {
    pub fn out_channels(self) -> usize {
        match self {
            Head::Sigmoid => 1,
            Head::Ordinal { num_raters } => num_raters + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub hidden: usize,
    pub head: Head,
}

impl Architecture {
    pub fn new(head: Head) -> Self {
        Self {
            in_channels: 1,
            hidden: DEFAULT_HIDDEN,
            head,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_channels()
    }

    pub fn num_params(&self) -> usize {
        let l = self.layout();
        l.bh + self.out_channels()
    }

    fn layout(&self) -> Layout {
        let (ci, ch, co) = (self.in_channels, self.hidden, self.out_channels());
        let w1 = 0;
        let b1 = w1 + ch * ci * 9;
        let w2 = b1 + ch;
        let b2 = w2 + ch * ch * 9;
        let wh = b2 + ch;
        let bh = wh + co * ch;
        Layout { w1, b1, w2, b2, wh, bh }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wh: usize,
    bh: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    arch: Architecture,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub height: usize,
    pub width: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// Output logits, channel-major.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetOutput {
    Foreground(ForegroundProbMap),
    Ordinal(OrdinalProbMap),
}

impl NetOutput {
    /// Foreground probability; ordinal outputs are collapsed by majority mass.
    pub fn foreground(&self) -> ForegroundProbMap {
        match self {
            NetOutput::Foreground(p) => p.clone(),
            NetOutput::Ordinal(p) => aggregate_foreground(p),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ForwardCache {
    /// On/off state of every hidden ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a1.iter().chain(&self.a2).map(|&a| a > 0.0).collect()
    }
}

impl TinyNet {
    /// Kaiming-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let l = arch.layout();
        let mut params = vec![0.0; arch.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = [
            (l.w1, l.b1, arch.in_channels * 9),
            (l.w2, l.b2, arch.hidden * 9),
            (l.wh, l.bh, arch.hidden),
        ];
        for (start, end, fan_in) in blocks {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ArchitectureMismatch("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the head weights and bias.
    pub fn zero_head(&mut self) {
        let l = self.arch.layout();
        self.params[l.wh..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward_cached(&self, image: &Grid2D<f64>) -> ForwardCache {
        let (h, w) = image.dims();
        let hw = h * w;
        let l = self.arch.layout();
        let (ch, co) = (self.arch.hidden, self.arch.out_channels());
        let p = &self.params;
        let input = image.as_slice().to_vec();

        let mut a1 = vec![0.0; ch * hw];
        for o in 0..ch {
            let out = &mut a1[o * hw..(o + 1) * hw];
            out.fill(p[l.b1 + o]);
            conv3x3_accumulate(out, &input, &p[l.w1 + o * 9..l.w1 + o * 9 + 9], h, w);
            relu(out);
        }

        let mut a2 = vec![0.0; ch * hw];
        for o in 0..ch {
            let out = &mut a2[o * hw..(o + 1) * hw];
            out.fill(p[l.b2 + o]);
            for i in 0..ch {
                let k = &p[l.w2 + (o * ch + i) * 9..][..9];
                conv3x3_accumulate(out, &a1[i * hw..(i + 1) * hw], k, h, w);
            }
            relu(out);
        }

        let mut logits = vec![0.0; co * hw];
        for k in 0..co {
            let out = &mut logits[k * hw..(k + 1) * hw];
            out.fill(p[l.bh + k]);
            for c in 0..ch {
                axpy(out, p[l.wh + k * ch + c], &a2[c * hw..(c + 1) * hw]);
            }
        }

        ForwardCache {
            height: h,
            width: w,
            input,
            a1,
            a2,
            logits,
        }
    }

    pub fn output_from_logits(&self, cache: &ForwardCache) -> NetOutput {
        let (h, w) = (cache.height, cache.width);
        match self.arch.head {
            Head::Sigmoid => NetOutput::Foreground(
                ForegroundProbMap::new(Grid2D::new(h, w, cache.logits.iter().map(|&z| sigmoid(z)).collect()).unwrap())
                    .expect("sigmoid is in [0, 1]"),
            ),
            Head::Ordinal { num_raters } => {
                NetOutput::Ordinal(OrdinalProbMap::from_logits(h, w, num_raters, &cache.logits))
            }
        }
    }

    pub fn forward(&self, image: &Grid2D<f64>) -> NetOutput {
        self.output_from_logits(&self.forward_cached(image))
    }

    /// Parameter gradients given `dL/dlogits` (channel-major, same layout as
    /// `cache.logits`).
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Vec<f64> {
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        let l = self.arch.layout();
        let (ch, co) = (self.arch.hidden, self.arch.out_channels());
        assert_eq!(grad_logits.len(), co * hw, "one gradient per logit");
        let p = &self.params;
        let mut g = vec![0.0; p.len()];

        // Head.
        let mut g_a2 = vec![0.0; ch * hw];
        for k in 0..co {
            let gk = &grad_logits[k * hw..(k + 1) * hw];
            g[l.bh + k] = gk.iter().sum();
            for c in 0..ch {
                let a = &cache.a2[c * hw..(c + 1) * hw];
                g[l.wh + k * ch + c] = dot(gk, a);
                axpy(&mut g_a2[c * hw..(c + 1) * hw], p[l.wh + k * ch + c], gk);
            }
        }
        relu_backward(&mut g_a2, &cache.a2);

        // Second convolution.
        let mut g_a1 = vec![0.0; ch * hw];
        for o in 0..ch {
            let go = &g_a2[o * hw..(o + 1) * hw];
            g[l.b2 + o] = go.iter().sum();
            for i in 0..ch {
                let a = &cache.a1[i * hw..(i + 1) * hw];
                let off = l.w2 + (o * ch + i) * 9;
                conv3x3_weight_grad(&mut g[off..off + 9], go, a, h, w);
                conv3x3_transpose_accumulate(&mut g_a1[i * hw..(i + 1) * hw], go, &p[off..off + 9], h, w);
            }
        }
        relu_backward(&mut g_a1, &cache.a1);

        // First convolution; no gradient to the input.
        for o in 0..ch {
            let go = &g_a1[o * hw..(o + 1) * hw];
            g[l.b1 + o] = go.iter().sum();
            let off = l.w1 + o * 9;
            conv3x3_weight_grad(&mut g[off..off + 9], go, &cache.input, h, w);
        }
        g
    }
}

fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the post-ReLU activation is zero.
fn relu_backward(grad: &mut [f64], act: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output column range for horizontal offset `dx - 1`.
fn col_range(dx: usize, w: usize) -> (usize, usize) {
    match dx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// `out[y][x] += sum_{dy,dx} k[dy][dx] * inp[y+dy-1][x+dx-1]`, zero padded.
fn conv3x3_accumulate(out: &mut [f64], inp: &[f64], k: &[f64], h: usize, w: usize) {
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for dy in 0..3 {
            let sy = y as isize + dy as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let irow = &inp[sy as usize * w..(sy as usize + 1) * w];
            let (k0, k1, k2) = (k[dy * 3], k[dy * 3 + 1], k[dy * 3 + 2]);
            if w == 1 {
                orow[0] += k1 * irow[0];
                continue;
            }
            orow[0] += k1 * irow[0] + k2 * irow[1];
            for x in 1..w - 1 {
                orow[x] += k0 * irow[x - 1] + k1 * irow[x] + k2 * irow[x + 1];
            }
            orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
        }
    }
}

/// Adjoint of `conv3x3_accumulate` w.r.t. its input:
/// `g_in[y+dy-1][x+dx-1] += k[dy][dx] * g_out[y][x]`.
fn conv3x3_transpose_accumulate(g_in: &mut [f64], g_out: &[f64], k: &[f64], h: usize, w: usize) {
    for sy in 0..h {
        let irow = &mut g_in[sy * w..(sy + 1) * w];
        for dy in 0..3 {
            // Output row y with y + dy - 1 = sy.
            let y = sy as isize + 1 - dy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            let orow = &g_out[y as usize * w..(y as usize + 1) * w];
            let (k0, k1, k2) = (k[dy * 3], k[dy * 3 + 1], k[dy * 3 + 2]);
            if w == 1 {
                irow[0] += k1 * orow[0];
                continue;
            }
            // Input column s receives k0 from x = s + 1, k1 from x = s, k2 from x = s - 1.
            irow[0] += k0 * orow[1] + k1 * orow[0];
            for s in 1..w - 1 {
                irow[s] += k0 * orow[s + 1] + k1 * orow[s] + k2 * orow[s - 1];
            }
            irow[w - 1] += k1 * orow[w - 1] + k2 * orow[w - 2];
        }
    }
}

/// `g_k[dy][dx] += sum_{y,x} g_out[y][x] * inp[y+dy-1][x+dx-1]`.
fn conv3x3_weight_grad(g_k: &mut [f64], g_out: &[f64], inp: &[f64], h: usize, w: usize) {
    for dy in 0..3 {
        let (y0, y1) = col_range(dy, h);
        for dx in 0..3 {
            let (x0, x1) = col_range(dx, w);
            let mut acc = 0.0;
            for y in y0..y1 {
                let sy = y + dy - 1;
                let orow = &g_out[y * w + x0..y * w + x1];
                let irow = &inp[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1];
                acc += dot(orow, irow);
            }
            g_k[dy * 3 + dx] += acc;
        }
    }
}
