//! Supervised sparse gating over a pool of expert embedding models.
//!
//! Each expert owns a region of input space described by a predicate over
//! coarse attributes (brand, color, type). Gates predict those attributes,
//! the registry turns predictions into a sparse weight vector, and only the
//! experts with nonzero weight are evaluated.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::datamodel::{Attribute, DatasetView, Sample, Split};
use crate::error::{bail, Error, Result};
use crate::losses::LossConfig;
use crate::math::{exp, squared_distance};
use crate::metrics::{map_cmc_from_distances, recall_at_k_from_distances, MapCmc, Protocol, RetrievalMeta};
use crate::model::{EmbeddingModel, EmbeddingVector, ModelDescriptor};
use crate::training::{train, ProxyClasses, Recipe, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Predicate {
    /// Matches every input; reserved for the default expert.
    Any,
    Equals(Attribute, u32),
}

impl Predicate {
    pub fn attribute(&self) -> Option<Attribute> {
        match self {
            Predicate::Any => None,
            Predicate::Equals(a, _) => Some(*a),
        }
    }

    pub fn overlaps(&self, other: &Predicate) -> bool {
        match (self, other) {
            (Predicate::Any, _) | (_, Predicate::Any) => true,
            (Predicate::Equals(a, x), Predicate::Equals(b, y)) => a != b || x == y,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "*" || s == "any" {
            return Ok(Predicate::Any);
        }
        let Some((name, value)) = s.split_once('=') else {
            bail!(Registry, "bad predicate `{s}`: expected `any` or `<attribute>=<id>`");
        };
        let name = name.trim();
        let name = name.strip_suffix("_id").unwrap_or(name);
        let attribute = Attribute::parse(name).ok_or_else(|| Error::Registry(format!("unknown attribute `{name}`")))?;
        let value = value.trim().parse().map_err(|_| Error::Registry(format!("bad attribute value in `{s}`")))?;
        Ok(Predicate::Equals(attribute, value))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Any => f.write_str("any"),
            Predicate::Equals(a, v) => write!(f, "{}_id={v}", a.as_str()),
        }
    }
}

/// The team an expert belongs to. Experts in one dimension have disjoint
/// subspaces; the default dimension holds the single fallback expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TeamDimension {
    Default,
    Attribute(Attribute),
}

impl TeamDimension {
    pub fn as_str(&self) -> &'static str {
        match self {
            TeamDimension::Default => "default",
            TeamDimension::Attribute(a) => a.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "default" => Ok(TeamDimension::Default),
            other => Attribute::parse(other)
                .map(TeamDimension::Attribute)
                .ok_or_else(|| Error::Registry(format!("unknown team dimension `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertDescriptor {
    pub expert_id: String,
    pub dimension: TeamDimension,
    pub subspace: Predicate,
    /// Content hash of the expert's weights.
    pub checkpoint_ref: String,
    pub embedding_dim: usize,
}

impl ExpertDescriptor {
    pub fn new(
        expert_id: impl Into<String>,
        subspace: Predicate,
        checkpoint_ref: impl Into<String>,
        embedding_dim: usize,
    ) -> Self {
        let dimension = match subspace.attribute() {
            Some(a) => TeamDimension::Attribute(a),
            None => TeamDimension::Default,
        };
        Self { expert_id: expert_id.into(), dimension, subspace, checkpoint_ref: checkpoint_ref.into(), embedding_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.expert_id.is_empty() || self.expert_id.contains('|') || self.expert_id.contains(char::is_whitespace) {
            bail!(Registry, "invalid expert id `{}`", self.expert_id);
        }
        let consistent = match (self.dimension, self.subspace) {
            (TeamDimension::Default, Predicate::Any) => true,
            (TeamDimension::Attribute(a), Predicate::Equals(b, _)) => a == b,
            _ => false,
        };
        if !consistent {
            bail!(
                Registry,
                "expert `{}`: predicate `{}` does not belong to dimension `{}`",
                self.expert_id,
                self.subspace,
                self.dimension.as_str()
            );
        }
        if self.embedding_dim == 0 {
            bail!(Registry, "expert `{}` has zero embedding dimension", self.expert_id);
        }
        Ok(())
    }

    /// `expert_id | dimension | predicate | checkpoint_hash | dim`
    pub fn to_manifest_line(&self) -> String {
        format!(
            "{} | {} | {} | {} | {}",
            self.expert_id,
            self.dimension.as_str(),
            self.subspace,
            self.checkpoint_ref,
            self.embedding_dim
        )
    }

    pub fn parse_manifest_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() != 5 {
            bail!(Registry, "manifest record needs 5 `|`-separated fields, got {}: `{line}`", fields.len());
        }
        let embedding_dim =
            fields[4].parse().map_err(|_| Error::Registry(format!("bad embedding dimension `{}`", fields[4])))?;
        let d = Self {
            expert_id: fields[0].to_string(),
            dimension: TeamDimension::parse(fields[1])?,
            subspace: Predicate::parse(fields[2])?,
            checkpoint_ref: fields[3].to_string(),
            embedding_dim,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Something that maps samples to embeddings.
pub trait Embedder: Send + Sync {
    fn expert_embed(&self, samples: &[Sample]) -> Result<Vec<EmbeddingVector>>;

    fn output_dim(&self) -> usize;

    fn checkpoint_hash(&self) -> String;
}

/// Experts emit L2-normalized embeddings.
impl Embedder for EmbeddingModel {
    fn expert_embed(&self, samples: &[Sample]) -> Result<Vec<EmbeddingVector>> {
        self.embed(samples, true)
    }

    fn output_dim(&self) -> usize {
        self.embedding_dim()
    }

    fn checkpoint_hash(&self) -> String {
        self.content_hash()
    }
}

/// Counts the samples pushed through the wrapped embedder.
pub struct CallCounter<E> {
    pub inner: E,
    calls: AtomicUsize,
}

impl<E> CallCounter<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<E: Embedder> Embedder for CallCounter<E> {
    fn expert_embed(&self, samples: &[Sample]) -> Result<Vec<EmbeddingVector>> {
        self.calls.fetch_add(samples.len(), Ordering::SeqCst);
        self.inner.expert_embed(samples)
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn checkpoint_hash(&self) -> String {
        self.inner.checkpoint_hash()
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn expert_embed(&self, samples: &[Sample]) -> Result<Vec<EmbeddingVector>> {
        (**self).expert_embed(samples)
    }

    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }

    fn checkpoint_hash(&self) -> String {
        (**self).checkpoint_hash()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: u32,
    /// In [0, 1].
    pub confidence: f64,
}

/// A classifier for one coarse attribute.
pub trait AttributePredictor: Send + Sync {
    fn attribute(&self) -> Attribute;

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>>;
}

/// Wraps a closure as a predictor, for pluggable color or type classifiers.
pub struct FnGate<F> {
    attribute: Attribute,
    f: F,
}

impl<F: Fn(&Sample) -> Result<Prediction> + Send + Sync> FnGate<F> {
    pub fn new(attribute: Attribute, f: F) -> Self {
        Self { attribute, f }
    }
}

impl<F: Fn(&Sample) -> Result<Prediction> + Send + Sync> AttributePredictor for FnGate<F> {
    fn attribute(&self) -> Attribute {
        self.attribute
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        samples.iter().map(&self.f).collect()
    }
}

/// Reads the ground-truth label; useful as an upper bound on routing.
pub struct LabelGate(pub Attribute);

impl AttributePredictor for LabelGate {
    fn attribute(&self) -> Attribute {
        self.0
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        samples
            .iter()
            .map(|s| {
                s.attribute(self.0)
                    .map(|label| Prediction { label, confidence: 1.0 })
                    .ok_or_else(|| Error::MissingLabels(format!("sample lacks a {} label", self.0.as_str())))
            })
            .collect()
    }
}

/// Nearest-center classifier on the embeddings of a trained discriminator.
/// Confidence is a softmax over `-sharpness · d²` between unit vectors.
#[derive(Debug, Clone)]
pub struct ProxyGate {
    pub attribute: Attribute,
    pub model: Option<EmbeddingModel>,
    pub labels: Vec<u32>,
    /// Unit-length class centers, one per entry of `labels`.
    pub centers: Vec<Vec<f64>>,
    pub sharpness: f64,
    /// Predictions farther than this from every center get confidence 0.
    pub max_distance: Option<f64>,
}

pub const DEFAULT_SHARPNESS: f64 = 10.0;

impl ProxyGate {
    /// Nearest-prototype gate: each class center is the normalized mean unit
    /// embedding of the class over the train split.
    pub fn from_prototypes(
        model: EmbeddingModel,
        dataset: &DatasetView,
        attribute: Attribute,
        sharpness: f64,
    ) -> Result<Self> {
        let train: Vec<Sample> = dataset.samples().iter().filter(|s| s.split == Split::Train).cloned().collect();
        let mut labels = Vec::with_capacity(train.len());
        for s in &train {
            match s.attribute(attribute) {
                Some(l) => labels.push(l),
                None => bail!(MissingLabels, "train samples lack {} labels", attribute.as_str()),
            }
        }
        if train.is_empty() {
            return Err(Error::NoSamples);
        }
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut sums = vec![vec![0.0; model.embedding_dim()]; classes.len()];
        for (e, l) in model.embed(&train, true)?.iter().zip(&labels) {
            let c = classes.binary_search(l).unwrap();
            sums[c].iter_mut().zip(e.to_f64()).for_each(|(s, v)| *s += v);
        }
        Ok(Self {
            attribute,
            model: Some(model),
            labels: classes,
            centers: crate::metrics::l2_normalize_all(&sums),
            sharpness,
            max_distance: None,
        })
    }

    /// A gate for an attribute with one class; always predicts it.
    pub fn constant(attribute: Attribute, label: u32) -> Self {
        Self {
            attribute,
            model: None,
            labels: vec![label],
            centers: Vec::new(),
            sharpness: DEFAULT_SHARPNESS,
            max_distance: None,
        }
    }

    pub fn classify(&self, embeddings: &[Vec<f64>]) -> Vec<Prediction> {
        embeddings
            .iter()
            .map(|e| {
                let u = crate::metrics::l2_normalize_all(core::slice::from_ref(e)).remove(0);
                let d: Vec<f64> = self.centers.iter().map(|c| squared_distance(&u, c)).collect();
                let (best, &best_d) =
                    d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0))).unwrap();
                let z: f64 = d.iter().map(|&x| exp(-self.sharpness * (x - best_d))).sum();
                let mut confidence = 1.0 / z;
                if self.max_distance.is_some_and(|m| best_d > m) {
                    confidence = 0.0;
                }
                Prediction { label: self.labels[best], confidence }
            })
            .collect()
    }
}

impl AttributePredictor for ProxyGate {
    fn attribute(&self) -> Attribute {
        self.attribute
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        let Some(model) = &self.model else {
            return Ok(samples.iter().map(|_| Prediction { label: self.labels[0], confidence: 1.0 }).collect());
        };
        let emb: Vec<Vec<f64>> = model.embed(samples, true)?.iter().map(|e| e.to_f64()).collect();
        Ok(self.classify(&emb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// Exactly one expert per input.
    SingleBest,
    /// One expert per team dimension, equally weighted.
    PerDimension,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::SingleBest => "single_best",
            PolicyMode::PerDimension => "per_dimension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single_best" => Some(PolicyMode::SingleBest),
            "per_dimension" => Some(PolicyMode::PerDimension),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPolicy {
    pub mode: PolicyMode,
    /// Dimension precedence when an input satisfies several teams.
    pub priority: Vec<Attribute>,
    /// Predictions below this confidence route to the default expert.
    pub confidence_threshold: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self { mode: PolicyMode::SingleBest, priority: Attribute::ALL.to_vec(), confidence_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// One weight per registered expert, in registry order.
    pub weights: Vec<f32>,
    /// Ids of experts with nonzero weight.
    pub selected: Vec<String>,
    pub evidence: Vec<(Attribute, Prediction)>,
    pub used_default: bool,
}

impl GateDecision {
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.weights.iter().copied().enumerate().filter(|&(_, w)| w != 0.0)
    }
}

#[derive(Clone)]
pub struct Expert {
    pub descriptor: ExpertDescriptor,
    pub model: Arc<dyn Embedder>,
}

/// An immutable snapshot of experts and gates. Extension produces a new
/// snapshot that shares the existing experts.
#[derive(Clone)]
pub struct TeamRegistry {
    experts: Vec<Expert>,
    gates: Vec<Arc<dyn AttributePredictor>>,
    pub policy: RoutingPolicy,
}

impl fmt::Debug for TeamRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TeamRegistry")
            .field("experts", &self.descriptors())
            .field("gates", &self.gates.iter().map(|g| g.attribute()).collect::<Vec<_>>())
            .field("policy", &self.policy)
            .finish()
    }
}

impl TeamRegistry {
    pub fn new(experts: Vec<Expert>, gates: Vec<Arc<dyn AttributePredictor>>, policy: RoutingPolicy) -> Result<Self> {
        let registry = Self { experts, gates, policy };
        registry.validate()?;
        Ok(registry)
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn descriptors(&self) -> Vec<&ExpertDescriptor> {
        self.experts.iter().map(|e| &e.descriptor).collect()
    }

    pub fn gates(&self) -> &[Arc<dyn AttributePredictor>] {
        &self.gates
    }

    pub fn default_expert(&self) -> Option<usize> {
        self.experts.iter().position(|e| e.descriptor.dimension == TeamDimension::Default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            bail!(Registry, "no experts registered");
        }
        let mut ids = BTreeMap::new();
        for (i, e) in self.experts.iter().enumerate() {
            e.descriptor.validate()?;
            if let Some(j) = ids.insert(e.descriptor.expert_id.as_str(), i) {
                bail!(Registry, "expert id `{}` registered twice (entries {j} and {i})", e.descriptor.expert_id);
            }
            if e.model.output_dim() != e.descriptor.embedding_dim {
                bail!(
                    Registry,
                    "expert `{}` declares dim {} but its model emits {}",
                    e.descriptor.expert_id,
                    e.descriptor.embedding_dim,
                    e.model.output_dim()
                );
            }
        }
        let defaults = self.experts.iter().filter(|e| e.descriptor.dimension == TeamDimension::Default).count();
        if defaults != 1 {
            bail!(Registry, "exactly one default expert is required, found {defaults}");
        }
        for (i, a) in self.experts.iter().enumerate() {
            for b in &self.experts[..i] {
                if a.descriptor.dimension == b.descriptor.dimension
                    && a.descriptor.subspace.overlaps(&b.descriptor.subspace)
                {
                    return Err(Error::OverlappingSubspace {
                        new: a.descriptor.expert_id.clone(),
                        existing: b.descriptor.expert_id.clone(),
                        predicate: a.descriptor.subspace.to_string(),
                    });
                }
            }
            if let Some(attr) = a.descriptor.subspace.attribute() {
                if !self.gates.iter().any(|g| g.attribute() == attr) {
                    bail!(
                        Registry,
                        "expert `{}` needs a {} gate but none is registered",
                        a.descriptor.expert_id,
                        attr.as_str()
                    );
                }
            }
        }
        let mut seen = Vec::new();
        for g in &self.gates {
            if seen.contains(&g.attribute()) {
                bail!(Registry, "two gates predict {}", g.attribute().as_str());
            }
            seen.push(g.attribute());
        }
        Ok(())
    }

    /// Returns a new snapshot with `expert` added; `self` is untouched.
    pub fn add_expert(&self, descriptor: ExpertDescriptor, model: Arc<dyn Embedder>) -> Result<TeamRegistry> {
        descriptor.validate()?;
        if let Some(existing) = self.experts.iter().find(|e| {
            e.descriptor.dimension == descriptor.dimension && e.descriptor.subspace.overlaps(&descriptor.subspace)
        }) {
            return Err(Error::OverlappingSubspace {
                new: descriptor.expert_id.clone(),
                existing: existing.descriptor.expert_id.clone(),
                predicate: descriptor.subspace.to_string(),
            });
        }
        let mut next = self.clone();
        next.experts.push(Expert { descriptor, model });
        next.validate()?;
        Ok(next)
    }

    /// Returns a new snapshot with `gate` added or replacing the gate for
    /// the same attribute.
    pub fn with_gate(&self, gate: Arc<dyn AttributePredictor>) -> Result<TeamRegistry> {
        let mut next = self.clone();
        next.gates.retain(|g| g.attribute() != gate.attribute());
        next.gates.push(gate);
        next.validate()?;
        Ok(next)
    }

    fn decide(&self, evidence: Vec<(Attribute, Prediction)>) -> GateDecision {
        let mut chosen: Vec<usize> = Vec::new();
        for &attr in &self.policy.priority {
            let Some(&(_, pred)) = evidence.iter().find(|(a, _)| *a == attr) else {
                continue;
            };
            if pred.confidence < self.policy.confidence_threshold {
                continue;
            }
            if let Some(i) =
                self.experts.iter().position(|e| e.descriptor.subspace == Predicate::Equals(attr, pred.label))
            {
                chosen.push(i);
                if self.policy.mode == PolicyMode::SingleBest {
                    break;
                }
            }
        }
        let used_default = chosen.is_empty();
        if used_default {
            chosen.push(self.default_expert().expect("validated registry has a default"));
        }
        let mut weights = vec![0.0f32; self.experts.len()];
        let share = 1.0 / chosen.len() as f32;
        for &i in &chosen {
            weights[i] = share;
        }
        GateDecision {
            selected: chosen.iter().map(|&i| self.experts[i].descriptor.expert_id.clone()).collect(),
            weights,
            evidence,
            used_default,
        }
    }

    /// Routes every sample. Gates for attributes without experts are skipped.
    pub fn route_batch(&self, samples: &[Sample]) -> Result<Vec<GateDecision>> {
        let mut per_gate = Vec::new();
        for g in &self.gates {
            let attr = g.attribute();
            if !self.experts.iter().any(|e| e.descriptor.subspace.attribute() == Some(attr)) {
                continue;
            }
            let preds = g.predict(samples)?;
            if preds.len() != samples.len() {
                bail!(
                    Registry,
                    "{} gate returned {} predictions for {} samples",
                    attr.as_str(),
                    preds.len(),
                    samples.len()
                );
            }
            per_gate.push((attr, preds));
        }
        Ok((0..samples.len()).map(|i| self.decide(per_gate.iter().map(|(a, p)| (*a, p[i])).collect())).collect())
    }

    pub fn route(&self, sample: &Sample) -> Result<GateDecision> {
        Ok(self.route_batch(core::slice::from_ref(sample))?.remove(0))
    }

    /// `Σ g(x)ᵢ·hᵢ(x)` over the nonzero weights; unselected experts are not run.
    pub fn ensemble_embed_batch(&self, samples: &[Sample], decisions: &[GateDecision]) -> Result<Vec<EmbeddingVector>> {
        if samples.len() != decisions.len() {
            bail!(InvalidArgument, "{} samples but {} decisions", samples.len(), decisions.len());
        }
        let mut jobs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (s, d) in decisions.iter().enumerate() {
            if d.weights.len() != self.experts.len() {
                bail!(Registry, "decision has {} weights for {} experts", d.weights.len(), self.experts.len());
            }
            let mut dim = None;
            for (i, _) in d.nonzero() {
                let di = self.experts[i].descriptor.embedding_dim;
                if dim.is_some_and(|x| x != di) {
                    bail!(Shape, "selected experts disagree on embedding dimension ({} vs {di})", dim.unwrap());
                }
                dim = Some(di);
                jobs.entry(i).or_default().push(s);
            }
            if dim.is_none() {
                bail!(Registry, "decision for sample {s} selects no expert");
            }
        }
        let mut outputs: BTreeMap<(usize, usize), EmbeddingVector> = BTreeMap::new();
        for (&e, members) in &jobs {
            let batch: Vec<Sample> = members.iter().map(|&s| samples[s].clone()).collect();
            let emb = self.experts[e].model.expert_embed(&batch)?;
            for (&s, v) in members.iter().zip(emb) {
                outputs.insert((s, e), v);
            }
        }
        decisions
            .iter()
            .enumerate()
            .map(|(s, d)| {
                let mut acc: Option<Vec<f32>> = None;
                for (e, w) in d.nonzero() {
                    let h = &outputs[&(s, e)].values;
                    match &mut acc {
                        None => acc = Some(h.iter().map(|v| w * v).collect()),
                        Some(a) => a.iter_mut().zip(h).for_each(|(a, v)| *a += w * v),
                    }
                }
                Ok(EmbeddingVector::new(acc.unwrap_or_default()))
            })
            .collect()
    }

    pub fn ensemble_embed(&self, sample: &Sample, decision: &GateDecision) -> Result<EmbeddingVector> {
        Ok(self.ensemble_embed_batch(core::slice::from_ref(sample), core::slice::from_ref(decision))?.remove(0))
    }

    /// Routes and embeds in one pass.
    pub fn embed_batch(&self, samples: &[Sample]) -> Result<(Vec<GateDecision>, Vec<EmbeddingVector>)> {
        let decisions = self.route_batch(samples)?;
        let emb = self.ensemble_embed_batch(samples, &decisions)?;
        Ok((decisions, emb))
    }

    /// Gate, expert and ranking in one call. Each query is compared against
    /// gallery items routed to the same experts; the rest of the gallery is
    /// ranked after them at infinite distance, since different experts
    /// embed into unrelated spaces.
    pub fn identify(&self, queries: &[Sample], gallery: &[Sample], protocol: Protocol) -> Result<Identification> {
        let (query_decisions, q) = self.embed_batch(queries)?;
        let (gallery_decisions, g) = self.embed_batch(gallery)?;
        let dist = restricted_distances(&q, &query_decisions, &g, &gallery_decisions);
        let meta = |s: &[Sample]| -> Vec<RetrievalMeta> {
            s.iter().map(|x| RetrievalMeta { identity: x.identity_id, camera: x.camera_id }).collect()
        };
        let result = map_cmc_from_distances(&dist, &meta(queries), &meta(gallery), protocol)?;
        Ok(Identification { query_decisions, gallery_decisions, result })
    }

    /// Leave-one-out Recall@k over `samples` with the same per-team
    /// restriction as [`TeamRegistry::identify`].
    pub fn recall_at_k(&self, samples: &[Sample], ks: &[usize]) -> Result<(Vec<GateDecision>, BTreeMap<usize, f64>)> {
        let (decisions, emb) = self.embed_batch(samples)?;
        let dist = restricted_distances(&emb, &decisions, &emb, &decisions);
        let labels: Vec<u32> = samples.iter().map(|s| s.identity_id).collect();
        let recall = recall_at_k_from_distances(&dist, &labels, ks)?;
        Ok((decisions, recall))
    }

    /// Manifest records, one per expert, in registry order.
    pub fn manifest_lines(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.descriptor.to_manifest_line()).collect()
    }
}

fn restricted_distances(
    rows: &[EmbeddingVector],
    row_decisions: &[GateDecision],
    cols: &[EmbeddingVector],
    col_decisions: &[GateDecision],
) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = cols.iter().map(EmbeddingVector::to_f64).collect();
    rows.iter()
        .zip(row_decisions)
        .map(|(a, da)| {
            let a = a.to_f64();
            cols.iter()
                .zip(col_decisions)
                .map(|(b, db)| if da.selected == db.selected { squared_distance(&a, b) } else { f64::INFINITY })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub query_decisions: Vec<GateDecision>,
    pub gallery_decisions: Vec<GateDecision>,
    pub result: MapCmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterSource {
    /// Mean unit embedding of each class over the train split.
    Prototypes,
    /// The learned proxies.
    Proxies,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOptions {
    pub centers: CenterSource,
    pub sharpness: f64,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self { centers: CenterSource::Prototypes, sharpness: DEFAULT_SHARPNESS }
    }
}

/// Trains an attribute discriminator with ProxyNCA and wraps it as a
/// nearest-center gate.
pub fn train_gate(
    dataset: &DatasetView,
    attribute: Attribute,
    descriptor: &ModelDescriptor,
    loss: &LossConfig,
    config: &TrainConfig,
    options: &GateOptions,
) -> Result<ProxyGate> {
    let train_samples: Vec<Sample> = dataset.samples().iter().filter(|s| s.split == Split::Train).cloned().collect();
    if train_samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut labels = Vec::with_capacity(train_samples.len());
    for s in &train_samples {
        match s.attribute(attribute) {
            Some(l) => labels.push(l),
            None => bail!(MissingLabels, "train samples lack {} labels", attribute.as_str()),
        }
    }
    let mut distinct = labels;
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(ProxyGate::constant(attribute, distinct[0]));
    }
    let config =
        TrainConfig { recipe: Recipe::BrandProxyNca, classes: ProxyClasses::Attribute(attribute), ..config.clone() };
    let outcome = train(dataset, descriptor, loss, &config)?;
    if options.centers == CenterSource::Prototypes {
        return ProxyGate::from_prototypes(outcome.model, dataset, attribute, options.sharpness);
    }
    let centers = crate::metrics::l2_normalize_all(&outcome.proxies.as_ref().expect("proxy recipe").rows_f64());
    Ok(ProxyGate {
        attribute,
        model: Some(outcome.model),
        labels: outcome.class_labels,
        centers,
        sharpness: options.sharpness,
        max_distance: None,
    })
}
