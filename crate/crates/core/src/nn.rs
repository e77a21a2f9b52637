//! A small CPU neural network engine: NCHW tensors, convolution, batch
//! normalization, activations, nearest upsampling and Adam.
//!
//! Layers follow a three-call protocol:
//! - `apply(&self, x)` evaluates in inference mode without touching state;
//! - `forward(&mut self, x)` evaluates in training mode and caches what the
//!   backward pass needs;
//! - `backward(&mut self, grad_out)` accumulates parameter gradients and
//!   returns the gradient with respect to the input of the last `forward`.
//!
//! Work is split across batch samples; cross-sample reductions are summed in
//! sample order so results do not depend on the thread count.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [n, c, h, w],
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], v: f32) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks samples along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape("stack shape mismatch".into()));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.n()).sum();
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [n, ca, h, w] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        if n != nb || h != hb || w != wb {
            return Err(Error::Shape(format!(
                "cannot concat {:?} with {:?}",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Tensor::from_vec([n, ca + cb, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut a = Vec::with_capacity(n * ca * hw);
        let mut b = Vec::with_capacity(n * (c - ca) * hw);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..ca * hw]);
            b.extend_from_slice(&s[ca * hw..]);
        }
        (
            Tensor {
                shape: [n, ca, h, w],
                data: a,
            },
            Tensor {
                shape: [n, c - ca, h, w],
                data: b,
            },
        )
    }
}

/// A trainable tensor (or a persistent buffer when `trainable` is false).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if trainable {
            vec![0.0; value.len()]
        } else {
            Vec::new()
        };
        Self {
            value,
            grad,
            shape,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding named parameters.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Draws every trainable convolution weight from `N(0, std)` in visit order.
pub fn init_normal(module: &mut dyn Params, seed: u64, std: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, std).expect("valid std");
    module.visit_mut("", &mut |name, p| {
        if p.trainable && name.ends_with("weight") && p.shape.len() == 4 {
            p.value
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
    });
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::new(
                vec![out_c, in_c, kernel, kernel],
                vec![0.0; out_c * in_c * kernel * kernel],
                true,
            ),
            bias: Param::new(vec![out_c], vec![0.0; out_c], true),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.in_c * k * k * n];
        for c in 0..self.in_c {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let n = oh * ow;
        let mut x = vec![0.0f32; self.in_c * h * w];
        for c in 0..self.in_c {
            let dst = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let kk = self.in_c * self.kernel * self.kernel;
        let npix = oh * ow;
        let mut out = Tensor::zeros(n, self.out_c, oh, ow);
        let olen = self.out_c * npix;
        par::for_each_chunk_mut(&mut out.data, olen, |s, o| {
            for (oc, chunk) in o.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[oc]);
            }
            let owned;
            let cols: &[f32] = if self.is_pointwise() {
                x.sample(s)
            } else {
                owned = self.im2col(x.sample(s), h, w, oh, ow);
                &owned
            };
            // SAFETY: all pointers address buffers of the stated extents.
            unsafe {
                matrixmultiply::sgemm(
                    self.out_c,
                    kk,
                    npix,
                    1.0,
                    self.weight.value.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    npix as isize,
                    1,
                    1.0,
                    o.as_mut_ptr(),
                    npix as isize,
                    1,
                );
            }
        });
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.apply(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward");
        let [n, _, h, w] = x.shape;
        let (oh, ow) = (g.h(), g.w());
        let kk = self.in_c * self.kernel * self.kernel;
        let npix = oh * ow;
        let per_sample = par::map_range(n, |s| {
            let owned;
            let cols: &[f32] = if self.is_pointwise() {
                x.sample(s)
            } else {
                owned = self.im2col(x.sample(s), h, w, oh, ow);
                &owned
            };
            let go = g.sample(s);
            let mut dw = vec![0.0f32; self.out_c * kk];
            let mut dcols = vec![0.0f32; kk * npix];
            // SAFETY: all pointers address buffers of the stated extents.
            unsafe {
                // dW = dOut · colsᵀ
                matrixmultiply::sgemm(
                    self.out_c,
                    npix,
                    kk,
                    1.0,
                    go.as_ptr(),
                    npix as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    npix as isize,
                    0.0,
                    dw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // dcols = Wᵀ · dOut
                matrixmultiply::sgemm(
                    kk,
                    self.out_c,
                    npix,
                    1.0,
                    self.weight.value.as_ptr(),
                    1,
                    kk as isize,
                    go.as_ptr(),
                    npix as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    npix as isize,
                    1,
                );
            }
            let dx = if self.is_pointwise() {
                dcols
            } else {
                self.col2im(&dcols, h, w, oh, ow)
            };
            let db: Vec<f32> = go.chunks(npix).map(|c| c.iter().sum()).collect();
            (dw, db, dx)
        });
        let mut dx = Vec::with_capacity(n * self.in_c * h * w);
        for (dw, db, dxs) in per_sample {
            self.weight
                .grad
                .iter_mut()
                .zip(&dw)
                .for_each(|(a, b)| *a += b);
            self.bias
                .grad
                .iter_mut()
                .zip(&db)
                .for_each(|(a, b)| *a += b);
            dx.extend_from_slice(&dxs);
        }
        Tensor {
            shape: [n, self.in_c, h, w],
            data: dx,
        }
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    /// Normalize each sample with its own statistics in inference mode
    /// instead of the running averages.
    pub inference_batch_stats: bool,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![c], vec![1.0; c], true),
            beta: Param::new(vec![c], vec![0.0; c], true),
            running_mean: Param::new(vec![c], vec![0.0; c], false),
            running_var: Param::new(vec![c], vec![1.0; c], false),
            eps: 1e-5,
            momentum: 0.1,
            inference_batch_stats: false,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels(), "batch norm channels");
        let hw = h * w;
        let mut out = x.clone();
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                let (mean, var) = if self.inference_batch_stats {
                    let v = &x.data[start..start + hw];
                    let mean = v.iter().map(|&a| a as f64).sum::<f64>() / hw as f64;
                    let var = v.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
                    (mean as f32, var as f32)
                } else {
                    (self.running_mean.value[ch], self.running_var.value[ch])
                };
                let scale = self.gamma.value[ch] / (var + self.eps).sqrt();
                let shift = self.beta.value[ch] - mean * scale;
                out.data[start..start + hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Training mode: batch statistics, running-average update, cached for backward.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels(), "batch norm channels");
        let hw = h * w;
        let count = (n * hw) as f64;
        let stats = par::map_range(c, |ch| {
            let mut sum = 0.0f64;
            for s in 0..n {
                let start = (s * c + ch) * hw;
                sum += x.data[start..start + hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for s in 0..n {
                let start = (s * c + ch) * hw;
                sq += x.data[start..start + hw]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            (mean, sq / count)
        });
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(c);
        for (ch, &(mean, var)) in stats.iter().enumerate() {
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std.push(istd as f32);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let start = (s * c + ch) * hw;
                for i in start..start + hw {
                    let xh = ((x.data[i] as f64 - mean) * istd) as f32;
                    xhat.data[i] = xh;
                    out.data[i] = g * xh + b;
                }
            }
            let m = self.momentum;
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean as f32;
            self.running_var.value[ch] =
                (1.0 - m) * self.running_var.value[ch] + m * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (xhat, inv_std) = self
            .cache
            .take()
            .expect("batch norm backward without forward");
        let [n, c, h, w] = g.shape;
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut dx = g.clone();
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for s in 0..n {
                let start = (s * c + ch) * hw;
                for i in start..start + hw {
                    sum_g += g.data[i] as f64;
                    sum_gx += (g.data[i] * xhat.data[i]) as f64;
                }
            }
            self.beta.grad[ch] += sum_g as f32;
            self.gamma.grad[ch] += sum_gx as f32;
            let k = self.gamma.value[ch] as f64 * inv_std[ch] as f64 / count;
            for s in 0..n {
                let start = (s * c + ch) * hw;
                for i in start..start + hw {
                    dx.data[i] = (k
                        * (count * g.data[i] as f64 - sum_g - xhat.data[i] as f64 * sum_gx))
                        as f32;
                }
            }
        }
        dx
    }
}

impl Params for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActKind {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

/// Pointwise activation; caches its input (or output, for sigmoid).
#[derive(Clone, Debug)]
pub struct Act {
    pub kind: ActKind,
    cache: Option<Tensor>,
}

impl Act {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self.kind {
            ActKind::Relu => x.map(|v| v.max(0.0)),
            ActKind::LeakyRelu(a) => x.map(|v| if v > 0.0 { v } else { a * v }),
            ActKind::Sigmoid => x.map(sigmoid),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.apply(x);
        self.cache = Some(match self.kind {
            ActKind::Sigmoid => y.clone(),
            _ => x.clone(),
        });
        y
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let cached = self
            .cache
            .take()
            .expect("activation backward without forward");
        let data = g
            .data
            .iter()
            .zip(&cached.data)
            .map(|(&gv, &c)| match self.kind {
                ActKind::Relu => {
                    if c > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                }
                ActKind::LeakyRelu(a) => {
                    if c > 0.0 {
                        gv
                    } else {
                        a * gv
                    }
                }
                ActKind::Sigmoid => gv * c * (1.0 - c),
            })
            .collect();
        Tensor {
            shape: g.shape,
            data,
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(n, c, oh, ow);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &Tensor) -> Tensor {
    let [n, c, oh, ow] = g.shape;
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(n, c, h, w);
    for p in 0..n * c {
        let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr: f32, beta1: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Elements whose gradient is exactly zero are
/// left untouched (moments included), so parameters that received no signal
/// in a step do not move.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Params) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                if g == 0.0 {
                    continue;
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        });
    }
}
