//! The residual embedding backbone.
//!
//! Layout: stem (7×7/2 conv, batch norm, optional global attention, ReLU,
//! 3×3/2 max pool), four stages of two basic blocks each (widths w, 2w, 4w,
//! 8w), then global average aggregation of the last convolutional map. There
//! is no fully-connected head; the embedding is the pooled final map.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, Cbam, CbamPlacement, GlobalAttention};
use crate::datamodel::{Image, Sample};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::nn::{Activation, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, LayerInfo, MaxPool, Param};
use crate::ops::ConvGeometry;
use crate::tensor::Tensor;

/// Per-channel normalization applied to [0,1] RGB input.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

const INFER_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Resnet18Like,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        "resnet18-like"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub backbone: Backbone,
    pub attention: AttentionConfig,
    pub embedding_dim: usize,
    /// Channel width of the stem and first stage.
    pub base_width: usize,
    /// Square input resolution in pixels.
    pub input_size: usize,
}

impl ModelDescriptor {
    /// Full-size ResNet-18 layout at 224×224 with a 512-d embedding.
    pub fn resnet18(attention: AttentionConfig) -> Self {
        Self { backbone: Backbone::Resnet18Like, attention, embedding_dim: 512, base_width: 64, input_size: 224 }
    }

    /// Narrow layout for CPU-scale experiments on 64×64 images.
    pub fn desk(attention: AttentionConfig) -> Self {
        Self { backbone: Backbone::Resnet18Like, attention, embedding_dim: 128, base_width: 16, input_size: 64 }
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn ga_width(&self) -> usize {
        self.attention.ga_width.unwrap_or(self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if self.base_width == 0 {
            bail!(InvalidDescriptor, "base width must be positive");
        }
        if self.embedding_dim != self.stage_width(3) {
            bail!(
                InvalidDescriptor,
                "embedding dim {} must equal the final stage width {}",
                self.embedding_dim,
                self.stage_width(3)
            );
        }
        if self.input_size < 32 {
            bail!(InvalidDescriptor, "input size {} below the 32 px minimum", self.input_size);
        }
        if a.ga_enabled && self.ga_width() == 0 {
            bail!(InvalidDescriptor, "global attention width must be positive");
        }
        for stage in 0..4 {
            if a.cbam_placement.applies_to(stage) {
                let c = self.stage_width(stage);
                if a.cbam_reduction == 0 || !c.is_multiple_of(a.cbam_reduction) || c < a.cbam_reduction {
                    bail!(
                        InvalidDescriptor,
                        "CBAM reduction {} does not divide {} channels of stage {}",
                        a.cbam_reduction,
                        c,
                        stage + 1
                    );
                }
                if a.spatial_kernel.is_multiple_of(2) {
                    bail!(InvalidDescriptor, "CBAM spatial kernel must be odd");
                }
            }
        }
        Ok(())
    }

    /// Trainable scalar count derived from the layout alone.
    pub fn parameter_count(&self) -> usize {
        let w = self.base_width;
        let a = &self.attention;
        let mut total = 3 * 49 * w + 2 * w;
        if a.ga_enabled {
            total += GlobalAttention::parameter_count(w, self.ga_width());
        }
        let mut in_c = w;
        for stage in 0..4 {
            let c = self.stage_width(stage);
            for block in 0..2 {
                let block_in = if block == 0 { in_c } else { c };
                total += 9 * block_in * c + 2 * c + 9 * c * c + 2 * c;
                if block_in != c || (block == 0 && stage > 0) {
                    total += block_in * c + 2 * c;
                }
                if a.cbam_placement.applies_to(stage) {
                    total += Cbam::parameter_count(c, a.cbam_reduction, a.spatial_kernel);
                }
            }
            in_c = c;
        }
        total
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let a = &self.attention;
        let mut kv = Vec::new();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("backbone", self.backbone.as_str().to_string());
        push("cbam_placement", a.cbam_placement.as_str().to_string());
        push("ga_enabled", format!("{}", a.ga_enabled));
        push("cbam_reduction", format!("{}", a.cbam_reduction));
        push("spatial_kernel", format!("{}", a.spatial_kernel));
        push("ga_width", format!("{}", self.ga_width()));
        push("embedding_dim", format!("{}", self.embedding_dim));
        push("base_width", format!("{}", self.base_width));
        push("input_size", format!("{}", self.input_size));
        kv
    }

    pub fn from_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut d = Self::desk(AttentionConfig::default());
        let mut seen = Vec::new();
        fn num(k: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::InvalidDescriptor(format!("`{k}` is not an integer: `{v}`")))
        }
        for (k, v) in pairs {
            match k {
                "backbone" if v == "resnet18-like" => {}
                "backbone" => bail!(InvalidDescriptor, "unknown backbone `{v}`"),
                "cbam_placement" => {
                    d.attention.cbam_placement = CbamPlacement::parse(v)
                        .ok_or_else(|| Error::InvalidDescriptor(format!("unknown CBAM placement `{v}`")))?
                }
                "ga_enabled" => {
                    d.attention.ga_enabled = match v {
                        "true" => true,
                        "false" => false,
                        _ => bail!(InvalidDescriptor, "`ga_enabled` must be true or false"),
                    }
                }
                "cbam_reduction" => d.attention.cbam_reduction = num(k, v)?,
                "spatial_kernel" => d.attention.spatial_kernel = num(k, v)?,
                "ga_width" => d.attention.ga_width = Some(num(k, v)?),
                "embedding_dim" => d.embedding_dim = num(k, v)?,
                "base_width" => d.base_width = num(k, v)?,
                "input_size" => d.input_size = num(k, v)?,
                _ => bail!(InvalidDescriptor, "unknown descriptor key `{k}`"),
            }
            seen.push(k.to_string());
        }
        for required in ["backbone", "embedding_dim", "base_width", "input_size"] {
            if !seen.iter().any(|s| s == required) {
                bail!(InvalidDescriptor, "missing descriptor key `{required}`");
            }
        }
        if d.attention.ga_width == Some(d.base_width) {
            d.attention.ga_width = None;
        }
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stem,
    Block1,
    Block2,
    Block3,
    Block4,
    Head,
}

/// One C×H×W activation captured at a named point of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values, normalized: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.values.iter().map(|&v| (v as f64) * (v as f64)).sum())
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        self.normalized = true;
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    name: String,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Activation,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    cbam: Option<Cbam>,
    downsample: Option<Downsample>,
    relu_out: Activation,
}

impl BasicBlock {
    fn new<R: rand::Rng + ?Sized>(
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        attention: Option<&AttentionConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), ConvGeometry::new(in_c, out_c, 3, stride, 1), false, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), ConvGeometry::new(out_c, out_c, 3, 1, 1), false, rng);
        let cbam = match attention {
            Some(a) => Some(Cbam::new(&format!("{name}.cbam"), out_c, a.cbam_reduction, a.spatial_kernel, rng)?),
            None => None,
        };
        let downsample = (stride != 1 || in_c != out_c).then(|| Downsample {
            conv: Conv2d::new(
                &format!("{name}.downsample.0"),
                ConvGeometry::new(in_c, out_c, 1, stride, 0),
                false,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{name}.downsample.1"), out_c),
        });
        Ok(Self {
            name: name.to_string(),
            conv1,
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_c),
            relu1: Activation::relu(&format!("{name}.relu1")),
            conv2,
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_c),
            cbam,
            downsample,
            relu_out: Activation::relu(&format!("{name}.relu")),
        })
    }

    pub fn has_cbam(&self) -> bool {
        self.cbam.is_some()
    }
}

impl Layer for BasicBlock {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.conv1.infer(x)?;
        out = self.bn1.infer(&out)?;
        out = self.relu1.infer(&out)?;
        out = self.conv2.infer(&out)?;
        out = self.bn2.infer(&out)?;
        if let Some(c) = &self.cbam {
            out = c.infer(&out)?;
        }
        match &self.downsample {
            Some(d) => out.add_assign(&d.bn.infer(&d.conv.infer(x)?)?),
            None => out.add_assign(x),
        }
        self.relu_out.infer(&out)
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.conv1.forward(x)?;
        out = self.bn1.forward(&out)?;
        out = self.relu1.forward(&out)?;
        out = self.conv2.forward(&out)?;
        out = self.bn2.forward(&out)?;
        if let Some(c) = &mut self.cbam {
            out = c.forward(&out)?;
        }
        match &mut self.downsample {
            Some(d) => {
                let sc = d.conv.forward(x)?;
                out.add_assign(&d.bn.forward(&sc)?);
            }
            None => out.add_assign(x),
        }
        self.relu_out.forward(&out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(grad)?;
        let mut main = g.clone();
        if let Some(c) = &mut self.cbam {
            main = c.backward(&main)?;
        }
        main = self.bn2.backward(&main)?;
        main = self.conv2.backward(&main)?;
        main = self.relu1.backward(&main)?;
        main = self.bn1.backward(&main)?;
        let mut gx = self.conv1.backward(&main)?;
        match &mut self.downsample {
            Some(d) => {
                let s = d.bn.backward(&g)?;
                gx.add_assign(&d.conv.backward(&s)?);
            }
            None => gx.add_assign(&g),
        }
        Ok(gx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some(c) = &self.cbam {
            c.visit(f);
        }
        if let Some(d) = &self.downsample {
            d.conv.visit(f);
            d.bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some(c) = &mut self.cbam {
            c.visit_mut(f);
        }
        if let Some(d) = &mut self.downsample {
            d.conv.visit_mut(f);
            d.bn.visit_mut(f);
        }
    }

    fn audit(&self, out: &mut Vec<LayerInfo>) {
        self.conv1.audit(out);
        self.bn1.audit(out);
        self.relu1.audit(out);
        self.conv2.audit(out);
        self.bn2.audit(out);
        if let Some(c) = &self.cbam {
            c.audit(out);
        }
        if let Some(d) = &self.downsample {
            d.conv.audit(out);
            d.bn.audit(out);
        }
        out.push(LayerInfo {
            name: format!("{}.residual", self.name),
            kind: crate::nn::LayerKind::Combine,
            trainable_params: 0,
        });
        self.relu_out.audit(out);
    }
}

/// Maps preprocessed images to embedding vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    descriptor: ModelDescriptor,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    ga: Option<GlobalAttention>,
    stem_relu: Activation,
    pool: MaxPool,
    blocks: Vec<BasicBlock>,
    head: GlobalAvgPool,
}

impl EmbeddingModel {
    /// Builds a randomly initialized model; the same descriptor and seed
    /// always give identical weights.
    pub fn new(descriptor: ModelDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = descriptor.base_width;
        let stem = Conv2d::new("stem.conv", ConvGeometry::new(3, w, 7, 2, 3), false, &mut rng);
        let ga =
            descriptor.attention.ga_enabled.then(|| GlobalAttention::new("ga", w, descriptor.ga_width(), &mut rng));
        let mut blocks = Vec::with_capacity(8);
        let mut in_c = w;
        for stage in 0..4 {
            let c = descriptor.stage_width(stage);
            let cbam = descriptor.attention.cbam_placement.applies_to(stage).then_some(&descriptor.attention);
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let block_in = if b == 0 { in_c } else { c };
                blocks.push(BasicBlock::new(
                    &format!("layer{}.{}", stage + 1, b),
                    block_in,
                    c,
                    stride,
                    cbam,
                    &mut rng,
                )?);
            }
            in_c = c;
        }
        Ok(Self {
            descriptor,
            stem,
            stem_bn: BatchNorm2d::new("stem.bn", w),
            ga,
            stem_relu: Activation::relu("stem.relu"),
            pool: MaxPool::new("stem.maxpool"),
            blocks,
            head: GlobalAvgPool::new("head.avgpool"),
        })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn embedding_dim(&self) -> usize {
        self.descriptor.embedding_dim
    }

    pub fn global_attention(&self) -> Option<&GlobalAttention> {
        self.ga.as_ref()
    }

    /// Basic blocks in order; stage `s` owns blocks `2s` and `2s+1`.
    pub fn blocks(&self) -> &[BasicBlock] {
        &self.blocks
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        if let Some(ga) = &self.ga {
            ga.visit(f);
        }
        for b in &self.blocks {
            b.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        if let Some(ga) = &mut self.ga {
            ga.visit_mut(f);
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    /// Sum of trainable scalars, recounted from the live parameters.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    /// `(name, trainable scalars)` for every trainable tensor.
    pub fn parameter_names(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if p.trainable {
                out.push((p.name.clone(), p.len()))
            }
        });
        out
    }

    /// Primitive layers in forward order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        self.stem.audit(&mut out);
        self.stem_bn.audit(&mut out);
        if let Some(ga) = &self.ga {
            ga.audit(&mut out);
        }
        self.stem_relu.audit(&mut out);
        self.pool.audit(&mut out);
        for b in &self.blocks {
            b.audit(&mut out);
        }
        self.head.audit(&mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.descriptor.input_size;
        if x.channels() != 3 || x.height() != s || x.width() != s {
            bail!(Shape, "model expects [N,3,{s},{s}] input, got {:?}", x.shape());
        }
        Ok(())
    }

    /// Inference-mode forward pass; returns [N,D,1,1].
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem_bn.infer(&self.stem.infer(x)?)?;
        if let Some(ga) = &self.ga {
            h = ga.infer(&h)?;
        }
        h = self.pool.infer(&self.stem_relu.infer(&h)?)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        self.head.infer(&h)
    }

    /// Training-mode forward pass that caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?;
        h = self.stem_bn.forward(&h)?;
        if let Some(ga) = &mut self.ga {
            h = ga.forward(&h)?;
        }
        h = self.stem_relu.forward(&h)?;
        h = self.pool.forward(&h)?;
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        self.head.forward(&h)
    }

    /// Backpropagates a [N,D,1,1] gradient, accumulating parameter gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        let mut g = self.head.backward(grad)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        g = self.pool.backward(&g)?;
        g = self.stem_relu.backward(&g)?;
        if let Some(ga) = &mut self.ga {
            g = ga.backward(&g)?;
        }
        g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)?;
        Ok(())
    }

    /// Activations after the stem (including global attention), each stage
    /// and the head, for one image.
    pub fn feature_maps(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let x = images_to_tensor(&[image], self.descriptor.input_size)?;
        let mut h = self.stem_bn.infer(&self.stem.infer(&x)?)?;
        if let Some(ga) = &self.ga {
            h = ga.infer(&h)?;
        }
        h = self.stem_relu.infer(&h)?;
        let mut maps = alloc::vec![FeatureMap { values: h.clone(), stage: Stage::Stem }];
        h = self.pool.infer(&h)?;
        let stages = [Stage::Block1, Stage::Block2, Stage::Block3, Stage::Block4];
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.infer(&h)?;
            if i % 2 == 1 {
                maps.push(FeatureMap { values: h.clone(), stage: stages[i / 2] });
            }
        }
        maps.push(FeatureMap { values: self.head.infer(&h)?, stage: Stage::Head });
        Ok(maps)
    }

    /// Embeds images in inference mode, optionally L2-normalized.
    pub fn embed_images(&self, images: &[&Image], normalize: bool) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let x = images_to_tensor(chunk, self.descriptor.input_size)?;
            let y = self.infer(&x)?;
            for i in 0..chunk.len() {
                let e = EmbeddingVector::new(y.item(i).to_vec());
                out.push(if normalize { e.normalized() } else { e });
            }
        }
        Ok(out)
    }

    pub fn embed(&self, samples: &[Sample], normalize: bool) -> Result<Vec<EmbeddingVector>> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        self.embed_images(&images, normalize)
    }

    /// Every state tensor (including batch-norm buffers) in canonical order.
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name.clone(), p.shape.clone(), p.value.clone())));
        out
    }

    /// Replaces all state tensors; names, order-independent, and shapes must
    /// match the model exactly.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let mut expected = 0;
        let mut error = None;
        self.visit_mut(&mut |p| {
            expected += 1;
            if error.is_some() {
                return;
            }
            match tensors.iter().find(|(n, _, _)| *n == p.name) {
                None => error = Some(Error::Checkpoint(format!("missing tensor `{}`", p.name))),
                Some((_, shape, values)) if *shape != p.shape || values.len() != p.value.len() => {
                    error = Some(Error::Checkpoint(format!(
                        "tensor `{}` has shape {:?}, model expects {:?}",
                        p.name, shape, p.shape
                    )))
                }
                Some((_, _, values)) => p.value.copy_from_slice(values),
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if tensors.len() != expected {
            bail!(Checkpoint, "checkpoint holds {} tensors, model has {}", tensors.len(), expected);
        }
        Ok(())
    }

    /// SHA-256 over the descriptor text and every state tensor.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.descriptor.to_key_values() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        self.visit(&mut |p| {
            hasher.update(p.name.as_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                hasher.update(v.to_le_bytes());
            }
        });
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
    s
}

/// Stacks HWC images into a normalized [N,3,S,S] tensor.
pub fn images_to_tensor(images: &[&Image], size: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros([images.len(), 3, size, size]);
    let plane = size * size;
    for (i, img) in images.iter().enumerate() {
        if img.width != size || img.height != size {
            bail!(Shape, "image is {}×{}, model expects {size}×{size}", img.width, img.height);
        }
        let dst = t.item_mut(i);
        for p in 0..plane {
            for c in 0..3 {
                dst[c * plane + p] = (img.data[p * 3 + c] - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
    }
    Ok(t)
}
