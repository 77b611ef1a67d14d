//! Clustering and retrieval metrics: NMI over k-means clusters, leave-one-out
//! Recall@k, and mAP/CMC for query-gallery ranking.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::math::{ln, squared_distance};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

impl ClusterAssignment {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.is_empty() {
            bail!(InvalidArgument, "empty partition");
        }
        if predicted.len() != truth.len() {
            bail!(InvalidArgument, "partitions cover {} and {} samples", predicted.len(), truth.len());
        }
        Ok(Self { predicted, truth })
    }
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * ln(p)
        })
        .sum()
}

/// `2·I(Ω;ℂ) / (H(Ω)+H(ℂ))` in nats. When both entropies vanish (each side a
/// single cluster) the partitions are identical and the value is 1.
pub fn nmi(assign: &ClusterAssignment) -> Result<f64> {
    if assign.predicted.is_empty() || assign.predicted.len() != assign.truth.len() {
        bail!(InvalidArgument, "partitions must be non-empty and cover the same samples");
    }
    let n = assign.predicted.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in assign.predicted.iter().zip(&assign.truth) {
        *joint.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let h_pred = entropy(rows.values().copied(), n);
    let h_truth = entropy(cols.values().copied(), n);
    if h_pred + h_truth == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(p, t), &c) in &joint {
        let pxy = c as f64 / n;
        let px = rows[&p] as f64 / n;
        let py = cols[&t] as f64 / n;
        mi += pxy * ln(pxy / (px * py));
    }
    Ok((2.0 * mi / (h_pred + h_truth)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, restarts: 10, max_iterations: 300, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the first
            // index not already chosen.
            (0..points.len()).find(|&i| !centroids.contains(&points[i])).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iterations: usize) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..max_iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| squared_distance(p, &centroids[a]).total_cmp(&squared_distance(p, &centroids[b])))
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster with the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        squared_distance(&points[a], &centroids[assignment[a]])
                            .total_cmp(&squared_distance(&points[b], &centroids[assignment[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                assignment[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = points.iter().zip(&assignment).map(|(p, &c)| squared_distance(p, &centroids[c])).sum();
    KMeansResult { assignment, centroids, wcss }
}

/// Best-of-restarts Lloyd's algorithm (k-means++ seeding) by within-cluster
/// sum of squares. Deterministic given the seed.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult> {
    if config.k == 0 || config.k > points.len() {
        bail!(InvalidArgument, "k = {} must be in 1..={}", config.k, points.len());
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        bail!(Shape, "points of unequal dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.restarts.max(1) {
        let init = kmeans_pp_init(points, config.k, &mut rng);
        let result = lloyd(points, init, config.max_iterations.max(1));
        if best.as_ref().is_none_or(|b| result.wcss < b.wcss) {
            best = Some(result);
        }
    }
    Ok(best.unwrap())
}

pub fn kmeans_cluster(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let config = KMeansConfig { restarts, ..KMeansConfig::new(k, seed) };
    Ok(kmeans(points, &config)?.assignment)
}

/// Pairwise squared Euclidean distances between two sets of points.
pub fn distance_matrix(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| cols.iter().map(|c| squared_distance(r, c)).collect()).collect()
}

/// Column indices of `row` sorted by ascending distance, ties by index.
pub fn rank_row(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Leave-one-out Recall@k from a square distance matrix.
pub fn recall_at_k_from_distances(dist: &[Vec<f64>], labels: &[u32], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = labels.len();
    if n < 2 {
        bail!(InvalidArgument, "Recall@k needs at least 2 samples");
    }
    if dist.len() != n || dist.iter().any(|r| r.len() != n) {
        bail!(Shape, "distance matrix must be {n}×{n}");
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut row = dist[q].clone();
        row[q] = f64::INFINITY;
        let order: Vec<usize> = rank_row(&row).into_iter().filter(|&j| j != q).collect();
        let first = order.iter().position(|&j| labels[j] == labels[q]);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n as f64)).collect())
}

/// Leave-one-out Recall@k with Euclidean distance between the given vectors.
pub fn recall_at_k(embeddings: &[Vec<f64>], labels: &[u32], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if embeddings.len() != labels.len() {
        bail!(InvalidArgument, "{} embeddings but {} labels", embeddings.len(), labels.len());
    }
    recall_at_k_from_distances(&distance_matrix(embeddings, embeddings), labels, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Cars196Zsl,
    Veri776,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Cars196Zsl => "cars196_zsl",
            Protocol::Veri776 => "veri776",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cars196_zsl" => Some(Protocol::Cars196Zsl),
            "veri776" => Some(Protocol::Veri776),
            _ => None,
        }
    }
}

/// Identity and camera of one query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalMeta {
    pub identity: u32,
    pub camera: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_index: usize,
    /// Gallery indices by ascending distance, excluding junk entries.
    pub gallery_order: Vec<usize>,
    /// `relevance[r]` for `gallery_order[r]`.
    pub relevance: Vec<bool>,
    pub distances: Vec<f64>,
}

impl RankingResult {
    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0;
        let mut sum = 0.0;
        for (r, &rel) in self.relevance.iter().enumerate() {
            if rel {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        (hits > 0).then(|| sum / hits as f64)
    }

    pub fn first_hit(&self) -> Option<usize> {
        self.relevance.iter().position(|&r| r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapCmc {
    pub map: f64,
    /// `cmc[k-1]` = fraction of valid queries with a hit in the top k.
    pub cmc: Vec<f64>,
    pub rankings: Vec<RankingResult>,
    pub valid_queries: usize,
    /// Queries with no relevant gallery item; excluded from both metrics.
    pub queries_without_relevant: usize,
}

impl MapCmc {
    pub fn cmc_at(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Ranks one query's gallery row. Under the VeRi protocol gallery items with
/// the query's identity *and* camera are dropped.
pub fn rank_query(
    query_index: usize,
    row: &[f64],
    query: &RetrievalMeta,
    gallery: &[RetrievalMeta],
    protocol: Protocol,
) -> RankingResult {
    let order: Vec<usize> = rank_row(row)
        .into_iter()
        .filter(|&g| {
            !(protocol == Protocol::Veri776
                && gallery[g].identity == query.identity
                && gallery[g].camera.is_some()
                && gallery[g].camera == query.camera)
        })
        .collect();
    RankingResult {
        query_index,
        relevance: order.iter().map(|&g| gallery[g].identity == query.identity).collect(),
        distances: order.iter().map(|&g| row[g]).collect(),
        gallery_order: order,
    }
}

pub fn map_cmc_from_distances(
    dist: &[Vec<f64>],
    query_meta: &[RetrievalMeta],
    gallery_meta: &[RetrievalMeta],
    protocol: Protocol,
) -> Result<MapCmc> {
    if dist.len() != query_meta.len() || dist.iter().any(|r| r.len() != gallery_meta.len()) {
        bail!(Shape, "distance matrix must be {}×{}", query_meta.len(), gallery_meta.len());
    }
    if query_meta.is_empty() || gallery_meta.is_empty() {
        bail!(InvalidArgument, "query and gallery must be non-empty");
    }
    let mut cmc_hits = vec![0usize; gallery_meta.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    let mut rankings = Vec::with_capacity(query_meta.len());
    for (q, row) in dist.iter().enumerate() {
        let ranking = rank_query(q, row, &query_meta[q], gallery_meta, protocol);
        if let (Some(ap), Some(first)) = (ranking.average_precision(), ranking.first_hit()) {
            valid += 1;
            ap_sum += ap;
            cmc_hits[first] += 1;
        }
        rankings.push(ranking);
    }
    let mut cmc = Vec::with_capacity(cmc_hits.len());
    let mut acc = 0;
    for h in cmc_hits {
        acc += h;
        cmc.push(if valid == 0 { 0.0 } else { acc as f64 / valid as f64 });
    }
    Ok(MapCmc {
        map: if valid == 0 { 0.0 } else { ap_sum / valid as f64 },
        cmc,
        rankings,
        valid_queries: valid,
        queries_without_relevant: query_meta.len() - valid,
    })
}

pub fn map_cmc(
    query_embeddings: &[Vec<f64>],
    gallery_embeddings: &[Vec<f64>],
    query_meta: &[RetrievalMeta],
    gallery_meta: &[RetrievalMeta],
    protocol: Protocol,
) -> Result<MapCmc> {
    if query_embeddings.len() != query_meta.len() || gallery_embeddings.len() != gallery_meta.len() {
        bail!(InvalidArgument, "embedding and metadata counts differ");
    }
    map_cmc_from_distances(&distance_matrix(query_embeddings, gallery_embeddings), query_meta, gallery_meta, protocol)
}

/// Aggregate evaluation numbers for one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub protocol: Protocol,
    pub nmi: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub map: Option<f64>,
    pub cmc: Vec<f64>,
    pub queries_without_relevant: usize,
}

pub const ZSL_RECALL_KS: [usize; 4] = [1, 2, 4, 8];
pub const VERI_CMC_KS: [usize; 2] = [1, 5];

/// Scales every vector to unit length (zero vectors stay zero).
pub fn l2_normalize_all(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|v| {
            let n = crate::math::l2_norm(v);
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v.clone()
            }
        })
        .collect()
}

/// Clustering-and-retrieval evaluation over one pool of samples: NMI of
/// k-means (k = number of distinct labels) and leave-one-out Recall@k, on
/// L2-normalized embeddings.
pub fn evaluate_zsl(embeddings: &[Vec<f64>], labels: &[u32], ks: &[usize], seed: u64) -> Result<EvaluationReport> {
    let points = l2_normalize_all(embeddings);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let predicted = kmeans_cluster(&points, distinct.len(), 10, seed)?;
    let truth = labels.iter().map(|l| distinct.binary_search(l).unwrap()).collect();
    let nmi = nmi(&ClusterAssignment::new(predicted, truth)?)?;
    Ok(EvaluationReport {
        protocol: Protocol::Cars196Zsl,
        nmi: Some(nmi),
        recall_at: recall_at_k(&points, labels, ks)?,
        map: None,
        cmc: Vec::new(),
        queries_without_relevant: 0,
    })
}

/// Query-gallery evaluation on L2-normalized embeddings.
pub fn evaluate_reid(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_meta: &[RetrievalMeta],
    gallery_meta: &[RetrievalMeta],
    protocol: Protocol,
) -> Result<(EvaluationReport, MapCmc)> {
    let result = map_cmc(&l2_normalize_all(query), &l2_normalize_all(gallery), query_meta, gallery_meta, protocol)?;
    let report = EvaluationReport {
        protocol,
        nmi: None,
        recall_at: BTreeMap::new(),
        map: Some(result.map),
        cmc: result.cmc.clone(),
        queries_without_relevant: result.queries_without_relevant,
    };
    Ok((report, result))
}
