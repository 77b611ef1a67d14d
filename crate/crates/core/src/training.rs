//! Training loop: warmup/step learning-rate schedule, Adam, PK batches and
//! the two recipes (attribute discriminator with ProxyNCA; identity expert
//! with triplet loss and random erasing).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, CbamPlacement};
use crate::datamodel::{
    color_shuffle, random_erase, sample_pk_batch_by, Attribute, DatasetView, ErasingConfig, Sample, Split,
};
use crate::error::{bail, Error, Result};
use crate::losses::{nearest_proxy, proxy_nca_loss, triplet_loss, LossConfig, ProxyBank};
use crate::metrics::recall_at_k;
use crate::model::{images_to_tensor, EmbeddingModel, ModelDescriptor};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    BrandProxyNca,
    ReidTriplet,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::BrandProxyNca => "brand_proxynca",
            Recipe::ReidTriplet => "reid_triplet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "brand_proxynca" => Some(Recipe::BrandProxyNca),
            "reid_triplet" => Some(Recipe::ReidTriplet),
            _ => None,
        }
    }

    /// CBAM on the first stage plus global attention for the discriminator;
    /// global attention without CBAM for the re-id expert.
    pub fn default_attention(self) -> AttentionConfig {
        match self {
            Recipe::BrandProxyNca => AttentionConfig::default().with_cbam(CbamPlacement::FirstBlock).with_ga(true),
            Recipe::ReidTriplet => AttentionConfig::default().with_ga(true),
        }
    }

    pub fn desk_descriptor(self) -> ModelDescriptor {
        ModelDescriptor::desk(self.default_attention())
    }

    pub fn full_descriptor(self) -> ModelDescriptor {
        ModelDescriptor::resnet18(self.default_attention())
    }

    pub fn default_loss(self) -> LossConfig {
        LossConfig::default()
    }
}

/// What a proxy recipe treats as its classes: a coarse attribute for a gate
/// discriminator, or identities for zero-shot retrieval training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyClasses {
    Identity,
    Attribute(Attribute),
}

impl ProxyClasses {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Attribute(a) => a.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "identity" {
            return Some(Self::Identity);
        }
        Attribute::parse(s).map(Self::Attribute)
    }

    pub fn label(self, s: &Sample) -> Option<u32> {
        match self {
            Self::Identity => Some(s.identity_id),
            Self::Attribute(a) => s.attribute(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
    pub batch_pk: (usize, usize),
    pub seed: u64,
    /// Optimizer steps per epoch; `None` derives it from the train split size.
    pub steps_per_epoch: Option<usize>,
    pub weight_decay: f64,
    /// Random erasing of training images, if enabled.
    pub erasing: Option<ErasingConfig>,
    /// Grayscale probability for channel-shuffle augmentation, if enabled.
    pub color_shuffle: Option<f64>,
    /// Labels the proxy recipe learns one proxy per.
    pub classes: ProxyClasses,
    /// Learning-rate multiplier for the proxy bank.
    pub proxy_lr_scale: f64,
    /// Validate every this many epochs (the final epoch is always validated).
    pub validate_every: usize,
    /// Size of the fixed train-split slice used for validation.
    pub validation_samples: usize,
}

impl TrainConfig {
    /// Full-scale defaults: 120 epochs, milestones {40, 70, 100}.
    pub fn full(recipe: Recipe, seed: u64) -> Self {
        Self {
            recipe,
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            total_epochs: 120,
            decay_milestones: alloc::vec![40, 70, 100],
            decay_factor: 0.1,
            batch_pk: (16, 4),
            seed,
            steps_per_epoch: None,
            weight_decay: 5e-4,
            erasing: (recipe == Recipe::ReidTriplet).then(ErasingConfig::default),
            color_shuffle: None,
            classes: ProxyClasses::Attribute(Attribute::Brand),
            proxy_lr_scale: 10.0,
            validate_every: 5,
            validation_samples: 512,
        }
    }

    /// Desk-scale profile for CPU runs on small synthetic sets.
    pub fn desk(recipe: Recipe, seed: u64) -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 2,
            total_epochs: 20,
            decay_milestones: alloc::vec![14, 18],
            batch_pk: (4, 8),
            steps_per_epoch: Some(8),
            validate_every: 5,
            validation_samples: 64,
            ..Self::full(recipe, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            errors.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            errors.push(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            errors.push("decay_milestones must be strictly increasing".into());
        }
        if self.decay_milestones.first().is_some_and(|&m| m <= self.warmup_epochs) {
            errors.push("decay_milestones must all exceed warmup_epochs".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            errors.push(format!("decay_factor must be in (0,1), got {}", self.decay_factor));
        }
        if self.batch_pk.0 == 0 || self.batch_pk.1 == 0 {
            errors.push("batch_pk entries must be positive".into());
        }
        if self.recipe == Recipe::ReidTriplet && self.batch_pk.1 < 2 {
            errors.push("triplet batches need K >= 2".into());
        }
        if self.steps_per_epoch == Some(0) {
            errors.push("steps_per_epoch must be positive".into());
        }
        if self.weight_decay < 0.0 {
            errors.push("weight_decay must be non-negative".into());
        }
        if self.validate_every == 0 {
            errors.push("validate_every must be positive".into());
        }
        if let Some(e) = &self.erasing {
            if let Err(err) = e.validate() {
                errors.push(format!("erasing: {err}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errors.join("; ")))
        }
    }
}

/// Learning rate for `epoch`: linear ramp from `base/10` to `base` over the
/// warmup epochs, then `base` times `decay_factor` per milestone passed.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.total_epochs {
        bail!(InvalidArgument, "epoch {epoch} outside 0..{}", config.total_epochs);
    }
    let base = config.base_lr;
    if epoch < config.warmup_epochs {
        let start = base / 10.0;
        return Ok(start + (base - start) * epoch as f64 / config.warmup_epochs as f64);
    }
    let passed = config.decay_milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(base * libm::pow(config.decay_factor, passed as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub current_lr: f64,
    pub loss_history: Vec<LossPoint>,
    pub best_metric: Option<f64>,
    pub checkpoint_refs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckpointReason {
    Milestone(usize),
    Best(f64),
    Final,
}

impl CheckpointReason {
    pub fn tag(&self) -> String {
        match self {
            CheckpointReason::Milestone(e) => format!("milestone-{e}"),
            CheckpointReason::Best(_) => "best".into(),
            CheckpointReason::Final => "final".into(),
        }
    }
}

/// Hooks for persisting checkpoints and progress; every method defaults to a
/// no-op.
pub trait TrainObserver {
    fn on_step(&mut self, _state: &TrainState) {}

    fn on_checkpoint(&mut self, _reason: CheckpointReason, _model: &EmbeddingModel, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub state: TrainState,
    /// The proxy bank, for the discriminator recipe.
    pub proxies: Option<ProxyBank>,
    /// Label value of each proxy row.
    pub class_labels: Vec<u32>,
}

impl TrainOutcome {
    /// Share of train samples whose nearest proxy carries their label.
    pub fn nearest_proxy_accuracy(&self, dataset: &DatasetView, classes: ProxyClasses) -> Result<f64> {
        let Some(bank) = &self.proxies else {
            bail!(InvalidArgument, "no proxies: model was not trained with a proxy loss");
        };
        let train: Vec<Sample> = dataset.samples().iter().filter(|s| s.split == Split::Train).cloned().collect();
        if train.is_empty() {
            return Err(Error::NoSamples);
        }
        let emb: Vec<Vec<f64>> = self.model.embed(&train, false)?.iter().map(|e| e.to_f64()).collect();
        let nearest = nearest_proxy(&emb, &bank.rows_f64());
        let hits = nearest.iter().zip(&train).filter(|(&z, s)| Some(self.class_labels[z]) == classes.label(s)).count();
        Ok(hits as f64 / train.len() as f64)
    }
}

fn recipe_label(recipe: Recipe, classes: ProxyClasses, s: &Sample) -> Option<u32> {
    match recipe {
        Recipe::BrandProxyNca => classes.label(s),
        Recipe::ReidTriplet => Some(s.identity_id),
    }
}

/// Checks that every train sample carries the label the recipe needs and
/// returns the sorted distinct labels.
pub fn preflight(dataset: &DatasetView, config: &TrainConfig) -> Result<Vec<u32>> {
    config.validate()?;
    let train: Vec<&Sample> = dataset.samples().iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::NoSamples);
    }
    let what = match config.recipe {
        Recipe::BrandProxyNca => config.classes.as_str(),
        Recipe::ReidTriplet => "identity",
    };
    let missing = train.iter().filter(|s| recipe_label(config.recipe, config.classes, s).is_none()).count();
    if missing > 0 {
        bail!(
            MissingLabels,
            "recipe {} needs `{what}` labels; {missing} of {} train samples lack them",
            config.recipe.as_str(),
            train.len()
        );
    }
    let labels: BTreeSet<u32> = train.iter().filter_map(|s| recipe_label(config.recipe, config.classes, s)).collect();
    if labels.len() < 2 {
        bail!(
            MissingLabels,
            "recipe {} needs at least 2 distinct `{what}` classes in the train split, found {}",
            config.recipe.as_str(),
            labels.len()
        );
    }
    Ok(labels.into_iter().collect())
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.item(i).iter().map(|&v| v as f64).collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec([rows.len(), d, 1, 1], rows.iter().flatten().map(|&v| v as f32).collect())
}

/// Leave-one-out Recall@1 of normalized embeddings on `samples`.
fn validation_metric(model: &EmbeddingModel, samples: &[Sample], labels: &[u32]) -> Result<f64> {
    let emb: Vec<Vec<f64>> = model.embed(samples, true)?.iter().map(|e| e.to_f64()).collect();
    Ok(recall_at_k(&emb, labels, &[1])?[&1])
}

pub fn train(
    dataset: &DatasetView,
    descriptor: &ModelDescriptor,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(dataset, descriptor, loss, config, &mut NoObserver)
}

/// Trains a fresh model. All randomness flows from `config.seed`, so the same
/// inputs give bit-identical loss histories and weights.
pub fn train_with_observer(
    dataset: &DatasetView,
    descriptor: &ModelDescriptor,
    loss: &LossConfig,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let class_labels = preflight(dataset, config)?;
    let (w, h) = dataset.image_size();
    if w != descriptor.input_size || h != descriptor.input_size {
        bail!(Shape, "dataset images are {w}x{h} but the model expects {0}x{0}", descriptor.input_size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EmbeddingModel::new(descriptor.clone(), config.seed)?;
    let mut proxies = (config.recipe == Recipe::BrandProxyNca)
        .then(|| ProxyBank::new(class_labels.len(), descriptor.embedding_dim, &mut rng));
    let mut state = TrainState::default();
    if config.total_epochs == 0 {
        return Ok(TrainOutcome { model, state, proxies, class_labels });
    }

    let label_of = |s: &Sample| recipe_label(config.recipe, config.classes, s);
    let class_index = |l: u32| class_labels.binary_search(&l).unwrap() as u32;
    let p = config.batch_pk.0.min(class_labels.len());
    let k = config.batch_pk.1;
    let train_indices = dataset.indices(Split::Train);
    let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| (train_indices.len() / (p * k)).max(1));

    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a11);
    let mut val_indices = train_indices.clone();
    rand::seq::SliceRandom::shuffle(val_indices.as_mut_slice(), &mut val_rng);
    val_indices.truncate(config.validation_samples.max(2));
    val_indices.sort_unstable();
    let val_samples: Vec<Sample> = val_indices.iter().map(|&i| dataset.samples()[i].clone()).collect();
    let val_labels: Vec<u32> = val_samples.iter().map(|s| label_of(s).unwrap()).collect();

    let mut adam = Adam::new(AdamConfig { weight_decay: config.weight_decay as f32, ..AdamConfig::default() });
    let mut proxy_adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });

    for epoch in 0..config.total_epochs {
        let lr = lr_at(config, epoch)?;
        state.epoch = epoch;
        state.current_lr = lr;
        for _ in 0..steps_per_epoch {
            let batch = sample_pk_batch_by(dataset, label_of, p, k, &mut rng)?;
            let samples: Vec<Sample> = batch
                .samples
                .iter()
                .map(|&i| {
                    let mut s = dataset.samples()[i].clone();
                    if let Some(g) = config.color_shuffle {
                        s = color_shuffle(&s, g, &mut rng);
                    }
                    if let Some(e) = &config.erasing {
                        s = random_erase(&s, e, &mut rng);
                    }
                    s
                })
                .collect();
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let x = images_to_tensor(&images, descriptor.input_size)?;
            model.zero_grad();
            let emb = to_rows(&model.forward_train(&x)?);
            let out = match &mut proxies {
                Some(bank) => {
                    bank.proxies.zero_grad();
                    let labels: Vec<u32> = batch.labels.iter().map(|&l| class_index(l)).collect();
                    let out = proxy_nca_loss(&emb, &labels, &bank.rows_f64(), loss)?;
                    bank.add_grad(out.grad_proxies.as_deref().unwrap_or(&[]));
                    out
                }
                None => triplet_loss(&emb, &batch.labels, loss)?,
            };
            if !out.loss.is_finite() || out.grad_embeddings.iter().flatten().any(|g| !g.is_finite()) {
                bail!(
                    Diverged,
                    "non-finite loss {} at epoch {epoch}, step {} (lr {lr:e}, recipe {})",
                    out.loss,
                    state.step,
                    config.recipe.as_str()
                );
            }
            model.backward(&from_rows(&out.grad_embeddings)?)?;
            let mut step = adam.begin_step();
            let mut failure = None;
            model.visit_mut(&mut |param| {
                if failure.is_none() {
                    failure = step.update(param, lr as f32).err();
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            if let Some(bank) = &mut proxies {
                proxy_adam.begin_step().update(&mut bank.proxies, (lr * config.proxy_lr_scale) as f32)?;
            }
            state.step += 1;
            state.loss_history.push(LossPoint { step: state.step, loss: out.loss, lr });
            observer.on_step(&state);
        }

        let last = epoch + 1 == config.total_epochs;
        if config.decay_milestones.contains(&(epoch + 1)) && !last {
            state.checkpoint_refs.push(model.content_hash());
            observer.on_checkpoint(CheckpointReason::Milestone(epoch + 1), &model, &state)?;
        }
        if (epoch + 1) % config.validate_every == 0 || last {
            let metric = validation_metric(&model, &val_samples, &val_labels)?;
            if state.best_metric.is_none_or(|b| metric > b) {
                state.best_metric = Some(metric);
                state.checkpoint_refs.push(model.content_hash());
                observer.on_checkpoint(CheckpointReason::Best(metric), &model, &state)?;
            }
        }
        if last {
            let hash = model.content_hash();
            if state.checkpoint_refs.last() != Some(&hash) {
                state.checkpoint_refs.push(hash);
            }
            observer.on_checkpoint(CheckpointReason::Final, &model, &state)?;
        }
    }
    Ok(TrainOutcome { model, state, proxies, class_labels })
}
