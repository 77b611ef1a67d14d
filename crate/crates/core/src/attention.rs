//! Attention modules attached to the backbone.
//!
//! [`GlobalAttention`] is a pooling-free gate on the stem output: two 3×3
//! convolutions with a leaky activation between them produce a joint
//! channel-spatial mask through a sigmoid, and the input is multiplied by
//! it. [`Cbam`] is the usual channel-then-spatial block attention.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math::sigmoid;
use crate::nn::{no_cache, Activation, Conv2d, Layer, LayerInfo, LayerKind, Param};
use crate::ops::ConvGeometry;
use crate::tensor::Tensor;

/// Negative slope of the leaky activation inside global attention.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CbamPlacement {
    None,
    All,
    FirstBlock,
    LastBlock,
}

impl CbamPlacement {
    /// Whether stage `stage` (0-based, of four) carries CBAM.
    pub fn applies_to(self, stage: usize) -> bool {
        match self {
            Self::None => false,
            Self::All => true,
            Self::FirstBlock => stage == 0,
            Self::LastBlock => stage == 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::All => "all",
            Self::FirstBlock => "first_block",
            Self::LastBlock => "last_block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "all" => Self::All,
            "first_block" | "cbam-1" => Self::FirstBlock,
            "last_block" | "cbam-4" => Self::LastBlock,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub cbam_placement: CbamPlacement,
    pub ga_enabled: bool,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
    /// Internal channel width of global attention; `None` means the stem width.
    pub ga_width: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            cbam_placement: CbamPlacement::None,
            ga_enabled: false,
            cbam_reduction: 16,
            spatial_kernel: 7,
            ga_width: None,
        }
    }
}

impl AttentionConfig {
    pub fn with_cbam(mut self, placement: CbamPlacement) -> Self {
        self.cbam_placement = placement;
        self
    }

    pub fn with_ga(mut self, enabled: bool) -> Self {
        self.ga_enabled = enabled;
        self
    }
}

fn multiply_mask(x: &Tensor, mask: &Tensor) -> Tensor {
    x.zip_map(mask, |a, m| a * m)
}

#[derive(Debug, Clone)]
struct GaCache {
    input: Tensor,
    mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct GlobalAttention {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    act: Activation,
    cache: Option<GaCache>,
}

impl GlobalAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, width: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), ConvGeometry::new(channels, width, 3, 1, 1), true, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), ConvGeometry::new(width, channels, 3, 1, 1), true, rng),
            act: Activation::leaky(&format!("{name}.act"), LEAKY_SLOPE),
            cache: None,
        }
    }

    /// Trainable scalars for a `channels → width → channels` module.
    pub fn parameter_count(channels: usize, width: usize) -> usize {
        9 * channels * width + width + 9 * width * channels + channels
    }

    pub fn channels(&self) -> usize {
        self.conv1.geometry.in_channels
    }

    /// The element-wise mask in (0,1), same shape as the input.
    pub fn mask(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.infer(x)?;
        let h = self.act.infer(&h)?;
        Ok(self.conv2.infer(&h)?.map(sigmoid))
    }
}

impl Layer for GlobalAttention {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(multiply_mask(x, &self.mask(x)?))
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = self.act.forward(&h)?;
        let mask = self.conv2.forward(&h)?.map(sigmoid);
        let y = multiply_mask(x, &mask);
        self.cache = Some(GaCache { input: x.clone(), mask });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let GaCache { input, mask } = self.cache.take().ok_or_else(|| no_cache("global attention"))?;
        let mut grad_x = grad.zip_map(&mask, |g, m| g * m);
        let grad_pre = grad.zip_map(&input, |g, x| g * x).zip_map(&mask, |gm, m| gm * m * (1.0 - m));
        let g = self.conv2.backward(&grad_pre)?;
        let g = self.act.backward(&g)?;
        grad_x.add_assign(&self.conv1.backward(&g)?);
        Ok(grad_x)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        self.conv1.audit(out);
        self.act.audit(out);
        self.conv2.audit(out);
        out.push(LayerInfo {
            name: self.conv1.name().trim_end_matches(".conv1").to_string() + ".gate",
            kind: LayerKind::Combine,
            trainable_params: 0,
        });
    }
}

#[derive(Debug, Clone)]
struct CbamCache {
    input: Tensor,
    avg_arg_max: Vec<u32>,
    channel_mask: Vec<f32>,
    refined: Tensor,
    channel_argmax: Vec<u32>,
    spatial_mask: Tensor,
}

/// Channel attention (shared 1×1-conv MLP over average- and max-pooled
/// descriptors) followed by spatial attention (k×k conv over the channel-wise
/// mean and max maps).
#[derive(Debug, Clone)]
pub struct Cbam {
    name: String,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
    relu: Activation,
    cache: Option<CbamCache>,
}

impl Cbam {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
            bail!(InvalidDescriptor, "CBAM reduction {reduction} does not divide {channels} channels");
        }
        if spatial_kernel.is_multiple_of(2) {
            bail!(InvalidDescriptor, "CBAM spatial kernel must be odd, got {spatial_kernel}");
        }
        let hidden = channels / reduction;
        Ok(Self {
            name: name.to_string(),
            fc1: Conv2d::new(&format!("{name}.mlp.0"), ConvGeometry::new(channels, hidden, 1, 1, 0), true, rng),
            fc2: Conv2d::new(&format!("{name}.mlp.2"), ConvGeometry::new(hidden, channels, 1, 1, 0), true, rng),
            spatial: Conv2d::new(
                &format!("{name}.spatial"),
                ConvGeometry::new(2, 1, spatial_kernel, 1, spatial_kernel / 2),
                true,
                rng,
            ),
            relu: Activation::relu(&format!("{name}.mlp.1")),
            cache: None,
        })
    }

    pub fn parameter_count(channels: usize, reduction: usize, spatial_kernel: usize) -> usize {
        let hidden = channels / reduction;
        channels * hidden + hidden + hidden * channels + channels + 2 * spatial_kernel * spatial_kernel + 1
    }

    fn channels(&self) -> usize {
        self.fc1.geometry.in_channels
    }

    /// Stacks average descriptors (items 0..N) over max descriptors (N..2N).
    fn pool_descriptors(x: &Tensor) -> (Tensor, Vec<u32>) {
        let (n, c, plane) = (x.batch(), x.channels(), x.plane_len());
        let mut desc = Tensor::zeros([2 * n, c, 1, 1]);
        let mut arg = vec![0u32; n * c];
        for i in 0..n {
            for (ch, chunk) in x.item(i).chunks(plane).enumerate() {
                desc.item_mut(i)[ch] = chunk.iter().sum::<f32>() / plane as f32;
                let (best_i, best) =
                    chunk
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
                desc.item_mut(n + i)[ch] = best;
                arg[i * c + ch] = best_i as u32;
            }
        }
        (desc, arg)
    }

    fn channel_logits_to_mask(z: &Tensor, n: usize, c: usize) -> Vec<f32> {
        (0..n * c).map(|j| sigmoid(z.data()[j] + z.data()[n * c + j])).collect()
    }

    fn scale_channels(x: &Tensor, mask: &[f32]) -> Tensor {
        let (c, plane) = (x.channels(), x.plane_len());
        let mut y = x.clone();
        for (j, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let m = mask[(j / c) * c + j % c];
            chunk.iter_mut().for_each(|v| *v *= m);
        }
        y
    }

    /// [N,2,H,W] of channel-mean and channel-max maps, plus argmax channels.
    fn pool_channels(y: &Tensor) -> (Tensor, Vec<u32>) {
        let (n, c, plane) = (y.batch(), y.channels(), y.plane_len());
        let mut pooled = Tensor::zeros([n, 2, y.height(), y.width()]);
        let mut arg = vec![0u32; n * plane];
        for i in 0..n {
            let item = y.item(i);
            let out = pooled.item_mut(i);
            for p in 0..plane {
                let mut sum = 0.0;
                let mut best = f32::NEG_INFINITY;
                let mut best_c = 0;
                for ch in 0..c {
                    let v = item[ch * plane + p];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[p] = sum / c as f32;
                out[plane + p] = best;
                arg[i * plane + p] = best_c as u32;
            }
        }
        (pooled, arg)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            bail!(Shape, "CBAM expects {} channels, got {}", self.channels(), x.channels());
        }
        Ok(())
    }

    fn channel_pass(&self, x: &Tensor) -> Result<Vec<f32>> {
        let (descriptors, _) = Self::pool_descriptors(x);
        let h = self.relu.infer(&self.fc1.infer(&descriptors)?)?;
        let z = self.fc2.infer(&h)?;
        Ok(Self::channel_logits_to_mask(&z, x.batch(), x.channels()))
    }

    /// Channel mask, shape [N,C,1,1].
    pub fn channel_mask(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mask = self.channel_pass(x)?;
        Tensor::from_vec([x.batch(), x.channels(), 1, 1], mask)
    }

    /// Spatial mask computed on the channel-refined input, shape [N,1,H,W].
    pub fn spatial_mask(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mask = self.channel_pass(x)?;
        let refined = Self::scale_channels(x, &mask);
        let (pooled, _) = Self::pool_channels(&refined);
        Ok(self.spatial.infer(&pooled)?.map(sigmoid))
    }

    fn apply_spatial(refined: &Tensor, mask: &Tensor) -> Tensor {
        let (c, plane) = (refined.channels(), refined.plane_len());
        let mut out = refined.clone();
        for i in 0..refined.batch() {
            let m = &mask.item(i)[..plane];
            for chunk in out.item_mut(i).chunks_mut(plane).take(c) {
                chunk.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
            }
        }
        out
    }
}

impl Layer for Cbam {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mask = self.channel_pass(x)?;
        let refined = Self::scale_channels(x, &mask);
        let (pooled, _) = Self::pool_channels(&refined);
        let smask = self.spatial.infer(&pooled)?.map(sigmoid);
        Ok(Self::apply_spatial(&refined, &smask))
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (descriptors, avg_arg_max) = Self::pool_descriptors(x);
        let h = self.fc1.forward(&descriptors)?;
        let h = self.relu.forward(&h)?;
        let z = self.fc2.forward(&h)?;
        let channel_mask = Self::channel_logits_to_mask(&z, x.batch(), x.channels());
        let refined = Self::scale_channels(x, &channel_mask);
        let (pooled, channel_argmax) = Self::pool_channels(&refined);
        let spatial_mask = self.spatial.forward(&pooled)?.map(sigmoid);
        let out = Self::apply_spatial(&refined, &spatial_mask);
        self.cache =
            Some(CbamCache { input: x.clone(), avg_arg_max, channel_mask, refined, channel_argmax, spatial_mask });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| no_cache("cbam"))?;
        let CbamCache { input, avg_arg_max, channel_mask, refined, channel_argmax, spatial_mask } = cache;
        let (n, c, plane) = (input.batch(), input.channels(), input.plane_len());
        let [_, _, h, w] = input.shape();

        // out = refined ⊙ spatial_mask
        let mut grad_refined = Tensor::zeros(refined.shape());
        let mut grad_smask_pre = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let g = grad.item(i);
            let r = refined.item(i);
            let sm = spatial_mask.item(i);
            let gr = grad_refined.item_mut(i);
            let mut gsum = vec![0.0f32; plane];
            for ch in 0..c {
                for p in 0..plane {
                    let k = ch * plane + p;
                    gr[k] = g[k] * sm[p];
                    gsum[p] += g[k] * r[k];
                }
            }
            let gs = grad_smask_pre.item_mut(i);
            for p in 0..plane {
                gs[p] = gsum[p] * sm[p] * (1.0 - sm[p]);
            }
        }
        let grad_pooled = self.spatial.backward(&grad_smask_pre)?;
        for i in 0..n {
            let gp = grad_pooled.item(i).to_vec();
            let gr = grad_refined.item_mut(i);
            for p in 0..plane {
                let mean_share = gp[p] / c as f32;
                for ch in 0..c {
                    gr[ch * plane + p] += mean_share;
                }
                let best = channel_argmax[i * plane + p] as usize;
                gr[best * plane + p] += gp[plane + p];
            }
        }

        // refined = input ⊙ channel_mask
        let mut grad_x = Tensor::zeros(input.shape());
        let mut grad_z = Tensor::zeros([2 * n, c, 1, 1]);
        for i in 0..n {
            let gr = grad_refined.item(i);
            let xi = input.item(i);
            let gx = grad_x.item_mut(i);
            let mut gz = vec![0.0f32; c];
            for ch in 0..c {
                let m = channel_mask[i * c + ch];
                let mut gm = 0.0;
                for p in 0..plane {
                    let k = ch * plane + p;
                    gx[k] = gr[k] * m;
                    gm += gr[k] * xi[k];
                }
                gz[ch] = gm * m * (1.0 - m);
            }
            grad_z.item_mut(i).copy_from_slice(&gz);
            grad_z.item_mut(n + i).copy_from_slice(&gz);
        }
        let g = self.fc2.backward(&grad_z)?;
        let g = self.relu.backward(&g)?;
        let grad_desc = self.fc1.backward(&g)?;
        for i in 0..n {
            let gavg = grad_desc.item(i).to_vec();
            let gmax = grad_desc.item(n + i).to_vec();
            let gx = grad_x.item_mut(i);
            for ch in 0..c {
                let share = gavg[ch] / plane as f32;
                gx[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += share);
                gx[ch * plane + avg_arg_max[i * c + ch] as usize] += gmax[ch];
            }
        }
        Ok(grad_x)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        self.spatial.visit_mut(f);
    }

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        self.fc1.audit(out);
        self.relu.audit(out);
        self.fc2.audit(out);
        self.spatial.audit(out);
        out.push(LayerInfo { name: format!("{}.gate", self.name), kind: LayerKind::Combine, trainable_params: 0 });
    }
}
