//! Samples, dataset views, synthetic vehicle glyphs, random erasing and
//! identity-balanced batch sampling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::math;

/// An RGB image stored row-major, interleaved (HWC), intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail!(Shape, "{width}×{height} RGB image needs {} values, got {}", width * height * 3, data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * 3;
        &self.data[i..i + 3]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * 3;
        &mut self.data[i..i + 3]
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = libm::roundf(v.clamp(0.0, 1.0) * 255.0) / 255.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Coarse attributes a gate can predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Brand,
    Color,
    Type,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Brand, Attribute::Color, Attribute::Type];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Brand => "brand",
            Attribute::Color => "color",
            Attribute::Type => "type",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity_id: u32,
    pub brand_id: Option<u32>,
    pub color_id: Option<u32>,
    pub type_id: Option<u32>,
    pub camera_id: Option<u32>,
    pub split: Split,
}

impl Sample {
    pub fn attribute(&self, attribute: Attribute) -> Option<u32> {
        match attribute {
            Attribute::Brand => self.brand_id,
            Attribute::Color => self.color_id,
            Attribute::Type => self.type_id,
        }
    }

    /// True when every label field equals `other`'s; pixels are ignored.
    pub fn same_labels(&self, other: &Sample) -> bool {
        self.identity_id == other.identity_id
            && self.brand_id == other.brand_id
            && self.color_id == other.color_id
            && self.type_id == other.type_id
            && self.camera_id == other.camera_id
            && self.split == other.split
    }
}

/// An immutable, validated collection of samples.
///
/// Train identities are `0..num_train_identities`; query and gallery
/// identities follow and never overlap the train range.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    samples: Vec<Sample>,
    num_identities: usize,
    num_train_identities: usize,
    num_attribute_classes: BTreeMap<String, usize>,
    identity_labels: Vec<String>,
    by_identity: BTreeMap<u32, Vec<usize>>,
}

impl DatasetView {
    /// Validates and indexes `samples`. `identity_labels[i]` is the raw label
    /// of identity `i`.
    pub fn new(samples: Vec<Sample>, identity_labels: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::NoSamples);
        }
        let (w, h) = (samples[0].image.width, samples[0].image.height);
        let mut train_ids = BTreeMap::new();
        let mut test_ids = BTreeMap::new();
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut attr_values: BTreeMap<Attribute, BTreeMap<u32, ()>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.image.width != w || s.image.height != h {
                bail!(Dataset, "sample {i} is {}×{}, expected {w}×{h}", s.image.width, s.image.height);
            }
            match s.split {
                Split::Train => train_ids.insert(s.identity_id, ()),
                _ => test_ids.insert(s.identity_id, ()),
            };
            by_identity.entry(s.identity_id).or_default().push(i);
            for a in Attribute::ALL {
                if let Some(v) = s.attribute(a) {
                    attr_values.entry(a).or_default().insert(v, ());
                }
            }
        }
        if let Some(shared) = train_ids.keys().find(|id| test_ids.contains_key(id)) {
            bail!(Dataset, "identity {shared} appears in both train and test splits");
        }
        let n_train = train_ids.len();
        if train_ids.keys().enumerate().any(|(i, &id)| id as usize != i) {
            bail!(Dataset, "train identities must be contiguous from zero");
        }
        if test_ids.keys().any(|&id| (id as usize) < n_train) {
            bail!(Dataset, "test identities must follow the train range");
        }
        let num_identities = n_train + test_ids.len();
        let max_id = by_identity.keys().next_back().map_or(0, |&m| m as usize + 1);
        let identity_labels = if identity_labels.is_empty() {
            (0..max_id).map(|i| format!("{i}")).collect()
        } else {
            if identity_labels.len() < max_id {
                bail!(Dataset, "identity label table has {} entries, need {max_id}", identity_labels.len());
            }
            identity_labels
        };
        let num_attribute_classes =
            attr_values.into_iter().map(|(a, vals)| (a.as_str().to_string(), vals.len())).collect();
        Ok(Self {
            samples,
            num_identities,
            num_train_identities: n_train,
            num_attribute_classes,
            identity_labels,
            by_identity,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn num_train_identities(&self) -> usize {
        self.num_train_identities
    }

    pub fn num_test_identities(&self) -> usize {
        self.num_identities - self.num_train_identities
    }

    pub fn num_attribute_classes(&self) -> &BTreeMap<String, usize> {
        &self.num_attribute_classes
    }

    pub fn identity_labels(&self) -> &[String] {
        &self.identity_labels
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.samples[0].image.width, self.samples[0].image.height)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Indices of every query and gallery sample.
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split != Split::Train).collect()
    }

    pub fn identity_indices(&self, identity: u32) -> &[usize] {
        self.by_identity.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Distinct identity count within one split.
    pub fn split_identities(&self, split: Split) -> usize {
        let mut ids: Vec<u32> = self.samples.iter().filter(|s| s.split == split).map(|s| s.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// A view containing only `indices`, identities remapped so the train
    /// invariants hold again.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut builder = DatasetBuilder::new();
        for &i in indices {
            let s = &self.samples[i];
            builder.push(self.identity_labels[s.identity_id as usize].clone(), s.clone());
        }
        builder.build()
    }
}

/// Collects samples keyed by raw identity labels and remaps them to
/// contiguous ids (train first, then test, each in sorted label order).
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    entries: Vec<(String, Sample)>,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// `sample.identity_id` is ignored and replaced at build time.
    pub fn push(&mut self, raw_label: String, sample: Sample) {
        self.entries.push((raw_label, sample));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn build(self) -> Result<DatasetView> {
        if self.entries.is_empty() {
            return Err(Error::NoSamples);
        }
        let mut train: Vec<&str> = Vec::new();
        let mut test: Vec<&str> = Vec::new();
        for (label, s) in &self.entries {
            if s.split == Split::Train {
                train.push(label);
            } else {
                test.push(label);
            }
        }
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        if let Some(l) = train.iter().find(|l| test.binary_search(l).is_ok()) {
            bail!(Dataset, "identity `{l}` appears in both train and test splits");
        }
        let labels: Vec<String> = train.iter().chain(&test).map(|s| s.to_string()).collect();
        let lookup: BTreeMap<&str, u32> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
        let samples =
            self.entries.iter().map(|(label, s)| Sample { identity_id: lookup[label.as_str()], ..s.clone() }).collect();
        DatasetView::new(samples, labels)
    }
}

/// Parses a `<id>_c<cam>_<frame>.<ext>` file name into `(id, camera)`.
pub fn parse_veri_name(name: &str) -> Option<(String, u32)> {
    let mut parts = name.split('_');
    let id = parts.next()?;
    let cam = parts.next()?.strip_prefix('c')?;
    if id.is_empty() || parts.next().is_none() {
        return None;
    }
    Some((id.to_string(), cam.parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// P identities × K instances, stored identity-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    /// Dataset indices, `p * k` of them.
    pub samples: Vec<usize>,
    /// Label of each entry of `samples`.
    pub labels: Vec<u32>,
    pub p: usize,
    pub k: usize,
}

impl TripletBatch {
    /// Every valid (anchor, positive, negative) over batch positions.
    pub fn all_triplets(&self) -> Vec<Triplet> {
        let n = self.samples.len();
        let mut out = Vec::new();
        for a in 0..n {
            for p in 0..n {
                if p == a || self.labels[p] != self.labels[a] {
                    continue;
                }
                for neg in 0..n {
                    if self.labels[neg] != self.labels[a] {
                        out.push(Triplet { anchor: a, positive: p, negative: neg });
                    }
                }
            }
        }
        out
    }
}

/// Draws P distinct identities from the train split and K images of each
/// (with replacement when an identity has fewer than K).
pub fn sample_pk_batch<R: Rng + ?Sized>(view: &DatasetView, p: usize, k: usize, rng: &mut R) -> Result<TripletBatch> {
    sample_pk_batch_by(view, |s| Some(s.identity_id), p, k, rng)
}

/// PK sampling keyed by an arbitrary label of train samples.
pub fn sample_pk_batch_by<R: Rng + ?Sized>(
    view: &DatasetView,
    key: impl Fn(&Sample) -> Option<u32>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if p == 0 || k == 0 {
        bail!(InvalidArgument, "P and K must be positive");
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in view.samples().iter().enumerate() {
        if s.split == Split::Train {
            if let Some(label) = key(s) {
                groups.entry(label).or_default().push(i);
            }
        }
    }
    if groups.len() < p {
        bail!(InvalidArgument, "batch needs {p} labels but the train split has {}", groups.len());
    }
    let mut labels: Vec<u32> = groups.keys().copied().collect();
    labels.shuffle(rng);
    labels.truncate(p);
    let mut samples = Vec::with_capacity(p * k);
    let mut batch_labels = Vec::with_capacity(p * k);
    for label in labels {
        let members = &groups[&label];
        if members.len() >= k {
            let mut pool = members.clone();
            pool.shuffle(rng);
            samples.extend_from_slice(&pool[..k]);
        } else {
            samples.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
        batch_labels.extend(core::iter::repeat_n(label, k));
    }
    Ok(TripletBatch { samples, labels: batch_labels, p, k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErasingConfig {
    pub probability: f64,
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self { probability: 0.5, area_range: (0.02, 0.4), aspect_range: (0.3, 3.33) }
    }
}

impl ErasingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if !(0.0..=1.0).contains(&self.probability) {
            bail!(InvalidArgument, "erasing probability {} outside [0,1]", self.probability);
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            bail!(InvalidArgument, "erasing area range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1");
        }
        let (a, b) = self.aspect_range;
        if !(a > 0.0 && a <= b) {
            bail!(InvalidArgument, "erasing aspect range ({a}, {b}) is invalid");
        }
        Ok(())
    }
}

const ERASE_ATTEMPTS: usize = 100;

/// With probability `p`, overwrites one rectangle (area fraction and aspect
/// ratio inside the configured ranges) with uniform random values. Labels
/// are never touched.
pub fn random_erase<R: Rng + ?Sized>(sample: &Sample, config: &ErasingConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if config.probability <= 0.0 || rng.random::<f64>() >= config.probability {
        return out;
    }
    let (w, h) = (sample.image.width, sample.image.height);
    let area = (w * h) as f64;
    let (lo, hi) = config.area_range;
    let (log_a, log_b) = (math::ln(config.aspect_range.0), math::ln(config.aspect_range.1));
    for _ in 0..ERASE_ATTEMPTS {
        let target = rng.random_range(lo..=hi) * area;
        let aspect = math::exp(rng.random_range(log_a..=log_b));
        let eh = libm::round(math::sqrt(target * aspect)) as usize;
        let ew = libm::round(math::sqrt(target / aspect)) as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let frac = (eh * ew) as f64 / area;
        if frac < lo || frac > hi {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for v in out.image.pixel_mut(y, x) {
                    *v = rng.random::<f32>();
                }
            }
        }
        return out;
    }
    out
}

/// Randomly permutes the RGB channels, or with probability `grayscale`
/// replaces them by their mean. Shape cues survive; paint color does not.
pub fn color_shuffle<R: Rng + ?Sized>(sample: &Sample, grayscale: f64, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if rng.random_bool(grayscale.clamp(0.0, 1.0)) {
        for px in out.image.data.chunks_mut(3) {
            let m = (px[0] + px[1] + px[2]) / 3.0;
            px.fill(m);
        }
        return out;
    }
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    for (dst, src) in out.image.data.chunks_mut(3).zip(sample.image.data.chunks(3)) {
        for c in 0..3 {
            dst[c] = src[perm[c]];
        }
    }
    out
}

/// How synthetic identities are divided between train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticSplit {
    /// The first `train_ids_per_brand` identities of every brand train.
    Identities { train_ids_per_brand: usize },
    /// All identities of the first `train_brands` brands train; the other
    /// brands are unseen (zero-shot).
    Brands { train_brands: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_brands: usize,
    pub ids_per_brand: usize,
    pub views_per_id: usize,
    pub seed: u64,
    pub resolution: usize,
    pub split: SyntheticSplit,
    /// Views of each test identity placed in the query split.
    pub queries_per_id: usize,
    pub num_cameras: u32,
}

impl SyntheticConfig {
    pub fn new(num_brands: usize, ids_per_brand: usize, views_per_id: usize, seed: u64) -> Self {
        Self {
            num_brands,
            ids_per_brand,
            views_per_id,
            seed,
            resolution: 64,
            split: SyntheticSplit::Identities { train_ids_per_brand: (ids_per_brand * 3).div_ceil(5) },
            queries_per_id: 2,
            num_cameras: 4,
        }
    }

    fn is_train(&self, brand: usize, id_in_brand: usize) -> bool {
        match self.split {
            SyntheticSplit::Identities { train_ids_per_brand } => id_in_brand < train_ids_per_brand,
            SyntheticSplit::Brands { train_brands } => brand < train_brands,
        }
    }
}

/// Body colors. Brand `b` paints its models from the pair at `2b` and
/// `2b + 1` (wrapping), so paint hints at the brand but not at the identity.
pub const PALETTE: [[f32; 3]; 16] = [
    [0.80, 0.10, 0.10],
    [0.15, 0.15, 0.15],
    [0.10, 0.25, 0.75],
    [0.85, 0.85, 0.80],
    [0.10, 0.55, 0.20],
    [0.55, 0.35, 0.20],
    [0.90, 0.75, 0.10],
    [0.35, 0.40, 0.50],
    [0.55, 0.20, 0.60],
    [0.60, 0.75, 0.30],
    [0.95, 0.50, 0.10],
    [0.25, 0.10, 0.35],
    [0.10, 0.60, 0.65],
    [0.95, 0.60, 0.70],
    [0.45, 0.05, 0.15],
    [0.70, 0.60, 0.40],
];

fn paint_line(brand: usize, pick: usize) -> usize {
    (2 * brand + pick % 2) % PALETTE.len()
}

/// Brand accent color used for wheel hubs and the side emblem; brands share
/// it across all their models, unlike paint.
const BRAND_ACCENTS: [[f32; 3]; 8] = [
    [1.00, 0.85, 0.00],
    [0.00, 0.90, 1.00],
    [1.00, 0.20, 0.70],
    [0.55, 1.00, 0.20],
    [1.00, 1.00, 1.00],
    [0.45, 0.30, 1.00],
    [1.00, 0.45, 0.35],
    [0.60, 0.60, 0.60],
];

/// Geometry of one brand's body family, in object units (length ≈ 2).
#[derive(Debug, Clone, Copy)]
struct BodyFamily {
    body_len: f32,
    body_h: f32,
    ground: f32,
    cabin_start: f32,
    cabin_end: f32,
    cabin_h: f32,
    cabin_slope: f32,
    wheel_r: f32,
    wheel_inset: f32,
    windows: u8,
    type_id: u32,
    accent: [f32; 3],
    /// Emblem position along the body, as a fraction of its length.
    emblem_pos: f32,
}

const FAMILIES: [BodyFamily; 8] = [
    // sedan
    BodyFamily {
        body_len: 1.8,
        body_h: 0.32,
        ground: 0.16,
        cabin_start: 0.28,
        cabin_end: 0.72,
        cabin_h: 0.30,
        cabin_slope: 0.12,
        wheel_r: 0.15,
        wheel_inset: 0.22,
        windows: 2,
        type_id: 0,
        accent: BRAND_ACCENTS[0],
        emblem_pos: 0.8,
    },
    // SUV
    BodyFamily {
        body_len: 1.7,
        body_h: 0.45,
        ground: 0.22,
        cabin_start: 0.15,
        cabin_end: 0.92,
        cabin_h: 0.36,
        cabin_slope: 0.03,
        wheel_r: 0.2,
        wheel_inset: 0.2,
        windows: 3,
        type_id: 1,
        accent: BRAND_ACCENTS[1],
        emblem_pos: 0.2,
    },
    // pickup truck: short cabin at the front
    BodyFamily {
        body_len: 1.9,
        body_h: 0.38,
        ground: 0.22,
        cabin_start: 0.05,
        cabin_end: 0.42,
        cabin_h: 0.38,
        cabin_slope: 0.02,
        wheel_r: 0.19,
        wheel_inset: 0.18,
        windows: 1,
        type_id: 2,
        accent: BRAND_ACCENTS[2],
        emblem_pos: 0.65,
    },
    // van: full-length tall cabin
    BodyFamily {
        body_len: 1.75,
        body_h: 0.55,
        ground: 0.14,
        cabin_start: 0.02,
        cabin_end: 0.98,
        cabin_h: 0.42,
        cabin_slope: 0.0,
        wheel_r: 0.14,
        wheel_inset: 0.15,
        windows: 4,
        type_id: 3,
        accent: BRAND_ACCENTS[3],
        emblem_pos: 0.35,
    },
    // hatchback: short body, cabin to the rear
    BodyFamily {
        body_len: 1.45,
        body_h: 0.34,
        ground: 0.15,
        cabin_start: 0.3,
        cabin_end: 0.98,
        cabin_h: 0.32,
        cabin_slope: 0.1,
        wheel_r: 0.14,
        wheel_inset: 0.16,
        windows: 2,
        type_id: 0,
        accent: BRAND_ACCENTS[4],
        emblem_pos: 0.75,
    },
    // coupe: low, long sloped roof
    BodyFamily {
        body_len: 1.85,
        body_h: 0.24,
        ground: 0.12,
        cabin_start: 0.35,
        cabin_end: 0.8,
        cabin_h: 0.22,
        cabin_slope: 0.25,
        wheel_r: 0.13,
        wheel_inset: 0.24,
        windows: 1,
        type_id: 0,
        accent: BRAND_ACCENTS[5],
        emblem_pos: 0.3,
    },
    // bus: very long and tall, many windows
    BodyFamily {
        body_len: 1.95,
        body_h: 0.62,
        ground: 0.12,
        cabin_start: 0.0,
        cabin_end: 1.0,
        cabin_h: 0.3,
        cabin_slope: 0.0,
        wheel_r: 0.13,
        wheel_inset: 0.12,
        windows: 6,
        type_id: 4,
        accent: BRAND_ACCENTS[6],
        emblem_pos: 0.5,
    },
    // compact: tiny, tall cabin
    BodyFamily {
        body_len: 1.2,
        body_h: 0.34,
        ground: 0.15,
        cabin_start: 0.15,
        cabin_end: 0.85,
        cabin_h: 0.38,
        cabin_slope: 0.08,
        wheel_r: 0.15,
        wheel_inset: 0.14,
        windows: 2,
        type_id: 0,
        accent: BRAND_ACCENTS[7],
        emblem_pos: 0.85,
    },
];

fn family_for(brand: usize, seed: u64) -> BodyFamily {
    let mut f = FAMILIES[brand % FAMILIES.len()];
    if brand >= FAMILIES.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (brand as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut jitter = |v: &mut f32, rel: f32| *v *= 1.0 + rng.random_range(-rel..rel);
        jitter(&mut f.body_len, 0.15);
        jitter(&mut f.body_h, 0.25);
        jitter(&mut f.cabin_h, 0.25);
        jitter(&mut f.wheel_r, 0.2);
        f.accent = [rng.random(), rng.random(), rng.random()];
        f.emblem_pos = rng.random_range(0.15..0.85);
    }
    f
}

/// Per-identity appearance on top of the brand family.
#[derive(Debug, Clone, Copy)]
struct IdentityLook {
    color: usize,
    /// Small per-identity offset on the paint color.
    tint: [f32; 3],
    stripe: Option<f32>,
    roof_rack: bool,
    panel_pos: f32,
    scale_jitter: f32,
}

struct ViewPose {
    angle: f32,
    scale: f32,
    dx: f32,
    dy: f32,
    flip: bool,
    brightness: f32,
}

fn inside_vehicle(f: &BodyFamily, look: &IdentityLook, u: f32, v: f32) -> Option<[f32; 3]> {
    // Object frame: u in [-L/2, L/2] along the body, v up from the ground.
    let half = f.body_len * look.scale_jitter / 2.0;
    let body_top = f.ground + f.body_h;
    let base = PALETTE[look.color];
    let body = [0, 1, 2].map(|c| (base[c] + look.tint[c]).clamp(0.0, 1.0));
    for cx in [-half + f.wheel_inset, half - f.wheel_inset] {
        let (du, dv) = (u - cx, v - f.wheel_r);
        let d2 = du * du + dv * dv;
        if d2 <= f.wheel_r * f.wheel_r {
            return Some(if d2 <= 0.3 * f.wheel_r * f.wheel_r { f.accent } else { [0.05, 0.05, 0.05] });
        }
    }
    if u.abs() <= half && v >= f.ground && v <= body_top {
        if let Some(s) = look.stripe {
            let sv = f.ground + s * f.body_h;
            if (v - sv).abs() < 0.035 {
                return Some([0.95, 0.95, 0.95]);
            }
        }
        let eu = -half + f.emblem_pos * 2.0 * half;
        if (u - eu).abs() < 0.07 && (v - (f.ground + 0.6 * f.body_h)).abs() < 0.06 {
            return Some(f.accent);
        }
        let pu = -half + look.panel_pos * 2.0 * half;
        if (u - pu).abs() < 0.08 && (v - (f.ground + 0.5 * f.body_h)).abs() < 0.05 {
            return Some([0.3, 0.3, 0.3]);
        }
        return Some(body);
    }
    let c0 = -half + f.cabin_start * 2.0 * half;
    let c1 = -half + f.cabin_end * 2.0 * half;
    let top = body_top + f.cabin_h;
    if v > body_top && v <= top {
        let t = (v - body_top) / f.cabin_h;
        let lo = c0 + t * f.cabin_slope;
        let hi = c1 - t * f.cabin_slope;
        if u >= lo && u <= hi {
            let inner = t > 0.15 && t < 0.85;
            let n = f.windows as f32;
            let seg = (u - lo) / (hi - lo) * n;
            let frac = seg - libm::floorf(seg);
            if inner && frac > 0.1 && frac < 0.9 {
                return Some([0.55, 0.7, 0.85]);
            }
            return Some(body);
        }
    }
    if look.roof_rack && v > top && v <= top + 0.05 && u >= c0 + 0.1 && u <= c1 - 0.1 {
        return Some([0.2, 0.2, 0.2]);
    }
    None
}

fn render(f: &BodyFamily, look: &IdentityLook, pose: &ViewPose, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let (sin, cos) = (libm::sinf(pose.angle), libm::cosf(pose.angle));
    let s = size as f32;
    let bg_top = rng.random_range(0.7..0.85f32);
    let bg_bottom = rng.random_range(0.55..0.7f32);
    let mut img = Image::from_fn(size, size, |_, _, _| 0.0);
    for y in 0..size {
        for x in 0..size {
            // Normalized image coords in [-1,1], y up.
            let nx = (x as f32 + 0.5) / s * 2.0 - 1.0 - pose.dx;
            let ny = 1.0 - (y as f32 + 0.5) / s * 2.0 - pose.dy;
            let rx = (cos * nx + sin * ny) / pose.scale;
            let ry = (-sin * nx + cos * ny) / pose.scale;
            let u = if pose.flip { -rx } else { rx };
            let v = ry + 0.45;
            let t = y as f32 / s;
            let bg = bg_top * (1.0 - t) + bg_bottom * t;
            let color = inside_vehicle(f, look, u, v).unwrap_or([bg, bg, bg * 0.97]);
            let px = img.pixel_mut(y, x);
            for c in 0..3 {
                let noise = (rng.random::<f32>() - 0.5) * 0.04;
                px[c] = (color[c] * pose.brightness + noise).clamp(0.0, 1.0);
            }
        }
    }
    img.quantize();
    img
}

/// Deterministic desk-scale dataset of rendered vehicle glyphs. The body
/// family encodes the brand, the paint and markings encode the identity,
/// and each view varies rotation, scale, crop, facing and lighting.
pub fn generate_synthetic(
    num_brands: usize,
    ids_per_brand: usize,
    views_per_id: usize,
    seed: u64,
) -> Result<DatasetView> {
    generate_synthetic_with(&SyntheticConfig::new(num_brands, ids_per_brand, views_per_id, seed))
}

pub fn generate_synthetic_with(config: &SyntheticConfig) -> Result<DatasetView> {
    if config.num_brands == 0 || config.ids_per_brand == 0 || config.views_per_id == 0 {
        bail!(InvalidArgument, "synthetic dataset counts must all be at least 1");
    }
    if config.resolution < 16 {
        bail!(InvalidArgument, "synthetic resolution must be at least 16");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut builder = DatasetBuilder::new();
    for brand in 0..config.num_brands {
        let family = family_for(brand, config.seed);
        for id in 0..config.ids_per_brand {
            let look = IdentityLook {
                color: paint_line(brand, rng.random_range(0..2)),
                tint: [0; 3].map(|_| rng.random_range(-0.08..0.08)),
                stripe: rng.random_bool(0.5).then(|| rng.random_range(0.25..0.75)),
                roof_rack: rng.random_bool(0.3),
                panel_pos: rng.random_range(0.2..0.8),
                scale_jitter: rng.random_range(0.95..1.05),
            };
            let train = config.is_train(brand, id);
            let label = format!("b{brand:03}_i{id:03}");
            for view in 0..config.views_per_id {
                let pose = ViewPose {
                    angle: rng.random_range(-0.3..0.3),
                    scale: rng.random_range(0.75..1.0),
                    dx: rng.random_range(-0.12..0.12),
                    dy: rng.random_range(-0.1..0.1),
                    flip: rng.random_bool(0.5),
                    brightness: rng.random_range(0.85..1.1),
                };
                let image = render(&family, &look, &pose, config.resolution, &mut rng);
                let split = if train {
                    Split::Train
                } else if view < config.queries_per_id {
                    Split::Query
                } else {
                    Split::Gallery
                };
                builder.push(
                    label.clone(),
                    Sample {
                        image,
                        identity_id: 0,
                        brand_id: Some(brand as u32),
                        color_id: Some(look.color as u32),
                        type_id: Some(family.type_id),
                        camera_id: Some(view as u32 % config.num_cameras.max(1)),
                        split,
                    },
                );
            }
        }
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_sample(size: usize) -> Sample {
        Sample {
            image: Image::from_fn(size, size, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0),
            identity_id: 0,
            brand_id: Some(1),
            color_id: None,
            type_id: None,
            camera_id: Some(2),
            split: Split::Train,
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = generate_synthetic(4, 5, 8, 7).unwrap();
        let b = generate_synthetic(4, 5, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * 5 * 8);
        assert_eq!(a.num_identities(), 20);
        assert_eq!(a.num_attribute_classes()["brand"], 4);
        assert_eq!(a.num_train_identities(), 12);
        let one = generate_synthetic(1, 1, 1, 3).unwrap();
        assert_eq!((one.len(), one.num_identities()), (1, 1));
    }

    #[test]
    fn synthetic_pixels_are_quantized() {
        let d = generate_synthetic(2, 1, 2, 1).unwrap();
        for s in d.samples() {
            assert!(s.image.data.iter().all(|v| (v * 255.0 - libm::roundf(v * 255.0)).abs() < 1e-4));
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(generate_synthetic(0, 1, 1, 0).is_err());
        assert!(generate_synthetic(1, 0, 1, 0).is_err());
        assert!(generate_synthetic(1, 1, 0, 0).is_err());
    }

    #[test]
    fn builder_remaps_train_first() {
        let mut b = DatasetBuilder::new();
        for (label, split) in [("z", Split::Train), ("a", Split::Query), ("m", Split::Train), ("a", Split::Gallery)] {
            b.push(label.to_string(), Sample { split, ..blank_sample(4) });
        }
        let v = b.build().unwrap();
        assert_eq!(v.identity_labels(), ["m", "z", "a"]);
        assert_eq!(v.num_train_identities(), 2);
        assert_eq!(v.samples()[0].identity_id, 1);
        assert_eq!(v.samples()[1].identity_id, 2);
    }

    #[test]
    fn builder_rejects_train_test_overlap_and_empty() {
        assert_eq!(DatasetBuilder::new().build(), Err(Error::NoSamples));
        let mut b = DatasetBuilder::new();
        b.push("x".into(), blank_sample(4));
        b.push("x".into(), Sample { split: Split::Query, ..blank_sample(4) });
        assert!(b.build().is_err());
    }

    #[test]
    fn veri_names_parse() {
        assert_eq!(parse_veri_name("0002_c002_00030600_0.jpg"), Some(("0002".into(), 2)));
        assert_eq!(parse_veri_name("0776_c015_1.png"), Some(("0776".into(), 15)));
        assert_eq!(parse_veri_name("bad.jpg"), None);
        assert_eq!(parse_veri_name("0002_x002_1.jpg"), None);
    }

    #[test]
    fn erasing_disabled_is_identity() {
        let s = blank_sample(32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ErasingConfig { probability: 0.0, ..Default::default() };
        assert_eq!(random_erase(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn erasing_is_deterministic_for_a_fixed_state() {
        let s = blank_sample(32);
        let cfg = ErasingConfig { probability: 1.0, ..Default::default() };
        let a = random_erase(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_erase(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn erasing_config_validation() {
        assert!(ErasingConfig::default().validate().is_ok());
        assert!(ErasingConfig { probability: 1.5, ..Default::default() }.validate().is_err());
        assert!(ErasingConfig { area_range: (0.5, 0.2), ..Default::default() }.validate().is_err());
        assert!(ErasingConfig { area_range: (0.0, 0.2), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pk_batch_shape_and_errors() {
        let d = generate_synthetic(3, 1, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_pk_batch(&d, 2, 2, &mut rng).unwrap();
        assert_eq!(b.samples.len(), 4);
        let mut ids = b.labels.clone();
        ids.dedup();
        assert_eq!(ids.len(), 2);
        assert!(sample_pk_batch(&d, 4, 2, &mut rng).is_err());
    }
}
