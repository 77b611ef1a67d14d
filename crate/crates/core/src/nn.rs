//! Trainable layers with hand-written backward passes.
//!
//! Every layer supports two forward modes: `infer` (immutable, no caches,
//! batch-norm uses running statistics) and `forward` (training, caches what
//! `backward` needs and updates running statistics). `backward` accumulates
//! parameter gradients and returns the gradient with respect to its input.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math;
use crate::ops::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::tensor::Tensor;

/// A named tensor of model state. Non-trainable params are buffers such as
/// batch-norm running statistics: they are checkpointed but never optimized
/// or counted as parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { name: name.into(), shape, value, grad, trainable: true }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self { trainable: false, grad: Vec::new(), ..Self::new(name, shape, value) }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Activation,
    Pool,
    /// Parameter-free element-wise gating (mask multiply, residual add).
    Combine,
}

/// One primitive layer as seen by a structural audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub trainable_params: usize,
}

pub trait Layer {
    fn infer(&self, x: &Tensor) -> Result<Tensor>;
    fn forward(&mut self, x: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn audit(&self, out: &mut Vec<LayerInfo>);
}

pub(crate) fn no_cache(layer: &str) -> crate::Error {
    crate::Error::InvalidArgument(format!("{layer}: backward called before a training forward pass"))
}

pub(crate) fn he_normal<R: Rng + ?Sized>(rng: &mut R, len: usize, fan: usize) -> Vec<f32> {
    let std = math::sqrt(2.0 / fan as f64);
    (0..len).map(|_| (math::normal(rng) * std) as f32).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(name: &str, geometry: ConvGeometry, bias: bool, rng: &mut R) -> Self {
        let g = geometry;
        let fan_out = g.out_channels * g.kernel * g.kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            he_normal(rng, g.weight_len(), fan_out),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![g.out_channels], vec![0.0; g.out_channels]));
        Self { geometry, weight, bias, cache: None }
    }

    pub fn name(&self) -> &str {
        self.weight.name.trim_end_matches(".weight")
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| b.value.as_slice()), &self.geometry)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| no_cache("conv"))?;
        conv2d_backward(
            &x,
            &self.weight.value,
            &self.geometry,
            grad,
            &mut self.weight.grad,
            self.bias.as_mut().map(|b| b.grad.as_mut_slice()),
        )
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo {
            name: self.name().to_string(),
            kind: LayerKind::Conv,
            trainable_params: self.weight.len() + self.bias.as_ref().map_or(0, Param::len),
        });
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.weight"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.bias"), vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            bail!(Shape, "batch norm expects {} channels, got {}", self.channels(), x.channels());
        }
        Ok(())
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut y = x.clone();
        let plane = x.plane_len();
        for n in 0..x.batch() {
            for (c, chunk) in y.item_mut(n).chunks_mut(plane).enumerate() {
                let scale = self.gamma.value[c] / math::sqrtf(self.running_var.value[c] + self.eps);
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                for v in chunk {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (n, c, plane) = (x.batch(), x.channels(), x.plane_len());
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for (ch, chunk) in x.item(i).chunks(plane).enumerate() {
                mean[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for (ch, chunk) in x.item(i).chunks(plane).enumerate() {
                var[ch] += chunk
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean[ch];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / math::sqrt(v + self.eps as f64)) as f32).collect();
        let mut normalized = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            let norm_item = normalized.item_mut(i);
            for ch in 0..c {
                let m = mean[ch] as f32;
                for v in &mut norm_item[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) * inv_std[ch];
                }
            }
            let norm_item = normalized.item(i);
            let out = y.item_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (o, &z) in
                    out[ch * plane..(ch + 1) * plane].iter_mut().zip(&norm_item[ch * plane..(ch + 1) * plane])
                {
                    *o = z * g + b;
                }
            }
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let m = self.momentum;
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean[ch] as f32;
            self.running_var.value[ch] = (1.0 - m) * self.running_var.value[ch] + m * (var[ch] * unbias) as f32;
        }
        self.cache = Some(BnCache { normalized, inv_std });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| no_cache("batch norm"))?;
        let (n, c, plane) = (grad.batch(), grad.channels(), grad.plane_len());
        let count = (n * plane) as f32;
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for i in 0..n {
            let g = grad.item(i);
            let xh = cache.normalized.item(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (gv, xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xv;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_gx[ch];
            self.beta.grad[ch] += sum_g[ch];
        }
        let mut dx = Tensor::zeros(grad.shape());
        for i in 0..n {
            let g = grad.item(i);
            let xh = cache.normalized.item(i);
            let out = dx.item_mut(i);
            for ch in 0..c {
                let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
                let r = ch * plane..(ch + 1) * plane;
                for ((o, gv), xv) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *o = k * (count * gv - sum_g[ch] - xv * sum_gx[ch]);
                }
            }
        }
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo {
            name: self.gamma.name.trim_end_matches(".weight").to_string(),
            kind: LayerKind::BatchNorm,
            trainable_params: 2 * self.channels(),
        });
    }
}

/// ReLU (`slope == 0`) or leaky ReLU.
#[derive(Debug, Clone)]
pub struct Activation {
    name: String,
    slope: f32,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn relu(name: &str) -> Self {
        Self::leaky(name, 0.0)
    }

    pub fn leaky(name: &str, slope: f32) -> Self {
        Self { name: name.to_string(), slope, cache: None }
    }
}

impl Layer for Activation {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.slope;
        Ok(x.map(|v| if v > 0.0 { v } else { v * s }))
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| no_cache("activation"))?;
        let s = self.slope;
        Ok(grad.zip_map(&x, |g, v| if v > 0.0 { g } else { g * s }))
    }

    fn visit(&self, _: &mut dyn FnMut(&Param)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo { name: self.name.clone(), kind: LayerKind::Activation, trainable_params: 0 });
    }
}

/// 3×3 stride-2 max pooling with padding 1.
#[derive(Debug, Clone)]
pub struct MaxPool {
    name: String,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), cache: None }
    }

    pub fn output_size(input: usize) -> usize {
        (input + 2 - 3) / 2 + 1
    }

    fn run(x: &Tensor, argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (n, c, h, w) = (x.batch(), x.channels(), x.height(), x.width());
        let (oh, ow) = (Self::output_size(h), Self::output_size(w));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut idx = Vec::new();
        for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane_in[i] > best {
                                best = plane_in[i];
                                best_i = i;
                            }
                        }
                    }
                    plane_out[oy * ow + ox] = best;
                    idx.push(best_i as u32);
                }
            }
        }
        if let Some(a) = argmax {
            *a = idx;
        }
        out
    }
}

impl Layer for MaxPool {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::run(x, None))
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut idx = Vec::new();
        let y = Self::run(x, Some(&mut idx));
        self.cache = Some((x.shape(), idx));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, idx) = self.cache.take().ok_or_else(|| no_cache("max pool"))?;
        let mut dx = Tensor::zeros(shape);
        let in_plane = shape[2] * shape[3];
        let out_plane = grad.plane_len();
        for (p, (gin, gout)) in dx.data_mut().chunks_mut(in_plane).zip(grad.data().chunks(out_plane)).enumerate() {
            for (j, &g) in gout.iter().enumerate() {
                gin[idx[p * out_plane + j] as usize] += g;
            }
        }
        Ok(dx)
    }

    fn visit(&self, _: &mut dyn FnMut(&Param)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo { name: self.name.clone(), kind: LayerKind::Pool, trainable_params: 0 });
    }
}

/// Spatial mean of each channel: [N,C,H,W] → [N,C,1,1].
#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    name: String,
    cache: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), cache: None }
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let plane = x.plane_len();
        let data = x.data().chunks(plane).map(|c| c.iter().sum::<f32>() / plane as f32).collect();
        Tensor::from_vec([x.batch(), x.channels(), 1, 1], data)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.shape());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.take().ok_or_else(|| no_cache("global pool"))?;
        let plane = shape[2] * shape[3];
        let data = grad.data().iter().flat_map(|&g| core::iter::repeat_n(g / plane as f32, plane)).collect();
        Tensor::from_vec(shape, data)
    }

    fn visit(&self, _: &mut dyn FnMut(&Param)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo { name: self.name.clone(), kind: LayerKind::Pool, trainable_params: 0 });
    }
}
