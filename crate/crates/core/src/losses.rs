//! Metric-learning objectives with analytic gradients, evaluated in `f64`.
//!
//! * Triplet loss: `[‖f(a)−f(p)‖² − ‖f(a)−f(n)‖² + α]₊`, with batch-hard or
//!   all-valid mining.
//! * ProxyNCA: each sample is pulled toward its class proxy and pushed away
//!   from the others, `d(x,p_y) + log Σ_{z≠y} exp(−d(x,p_z))`, where `d` is the
//!   squared distance between L2-normalized vectors scaled by `proxy_scale`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math::{self, l2_norm, log_sum_exp, squared_distance};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mining {
    BatchHard,
    AllValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over triplets with a positive hinge term (zero when none).
    MeanActive,
    /// Mean over all mined triplets.
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub mining: Mining,
    pub reduction: Reduction,
    pub proxy_scale: f64,
    pub num_proxies: usize,
    /// L2-normalize embeddings before the triplet distance.
    pub triplet_normalize: bool,
    /// L2-normalize embeddings and proxies before the proxy distance.
    pub proxy_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            mining: Mining::BatchHard,
            reduction: Reduction::MeanActive,
            proxy_scale: 3.0,
            num_proxies: 0,
            triplet_normalize: false,
            proxy_normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
    /// Present for proxy-based losses.
    pub grad_proxies: Option<Vec<Vec<f64>>>,
    /// Triplets contributing a positive hinge term (triplet loss only).
    pub active: usize,
    pub mined: usize,
}

/// One learnable proxy per training class. Only training reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    pub proxies: Param,
    pub num_proxies: usize,
    pub dim: usize,
}

impl ProxyBank {
    pub fn new<R: Rng + ?Sized>(num_proxies: usize, dim: usize, rng: &mut R) -> Self {
        let value = (0..num_proxies * dim).map(|_| math::normal(rng) as f32).collect();
        Self { proxies: Param::new("proxies", vec![num_proxies, dim], value), num_proxies, dim }
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.proxies.value.chunks(self.dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn add_grad(&mut self, grad: &[Vec<f64>]) {
        for (row, g) in self.proxies.grad.chunks_mut(self.dim).zip(grad) {
            row.iter_mut().zip(g).for_each(|(a, b)| *a += *b as f32);
        }
    }
}

/// `x / ‖x‖` and the norm.
fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(x).max(1e-12);
    (x.iter().map(|v| v / n).collect(), n)
}

/// Pulls a gradient w.r.t. `x̂ = x/‖x‖` back to `x`.
fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * dot) / norm).collect()
}

fn check_batch(embeddings: &[Vec<f64>], labels_len: usize) -> Result<usize> {
    if embeddings.len() != labels_len {
        bail!(InvalidArgument, "{} embeddings but {} labels", embeddings.len(), labels_len);
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        bail!(Shape, "embeddings of unequal dimension");
    }
    Ok(dim)
}

/// (anchor, positive, negative) index triples selected by `mining`.
pub fn mine_triplets(dist: &[Vec<f64>], labels: &[u32], mining: Mining) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        match mining {
            Mining::BatchHard => {
                let mut pos: Option<usize> = None;
                let mut neg: Option<usize> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if labels[j] == labels[a] {
                        if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                            pos = Some(j);
                        }
                    } else if neg.is_none_or(|q| dist[a][j] < dist[a][q]) {
                        neg = Some(j);
                    }
                }
                if let (Some(p), Some(q)) = (pos, neg) {
                    out.push((a, p, q));
                }
            }
            Mining::AllValid => {
                for p in 0..n {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for q in 0..n {
                        if labels[q] != labels[a] {
                            out.push((a, p, q));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Hinged triplet loss over mined triplets with gradients w.r.t. every embedding.
pub fn triplet_loss(embeddings: &[Vec<f64>], labels: &[u32], config: &LossConfig) -> Result<LossOutput> {
    let dim = check_batch(embeddings, labels.len())?;
    let mut distinct: Vec<u32> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        bail!(InvalidArgument, "triplet loss needs at least 2 identities in the batch");
    }
    let n = embeddings.len();
    let (points, norms): (Vec<Vec<f64>>, Vec<f64>) = if config.triplet_normalize {
        embeddings.iter().map(|e| normalize(e)).unzip()
    } else {
        (embeddings.to_vec(), vec![1.0; n])
    };
    let dist: Vec<Vec<f64>> = points.iter().map(|a| points.iter().map(|b| squared_distance(a, b)).collect()).collect();
    let triplets = mine_triplets(&dist, labels, config.mining);
    let mut grad = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut active = 0;
    for &(a, p, q) in &triplets {
        let term = dist[a][p] - dist[a][q] + config.margin;
        if term <= 0.0 {
            continue;
        }
        active += 1;
        total += term;
        for d in 0..dim {
            let ap = 2.0 * (points[a][d] - points[p][d]);
            let aq = 2.0 * (points[a][d] - points[q][d]);
            grad[a][d] += ap - aq;
            grad[p][d] -= ap;
            grad[q][d] += aq;
        }
    }
    let denom = match config.reduction {
        Reduction::MeanActive => active.max(1) as f64,
        Reduction::Mean => triplets.len().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    for g in grad.iter_mut().flatten() {
        *g /= denom;
    }
    if config.triplet_normalize {
        for i in 0..n {
            grad[i] = normalize_backward(&points[i], norms[i], &grad[i]);
        }
    }
    Ok(LossOutput { loss: total / denom, grad_embeddings: grad, grad_proxies: None, active, mined: triplets.len() })
}

/// ProxyNCA loss averaged over the batch, with gradients w.r.t. embeddings
/// and proxies.
pub fn proxy_nca_loss(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    proxies: &[Vec<f64>],
    config: &LossConfig,
) -> Result<LossOutput> {
    let dim = check_batch(embeddings, labels.len())?;
    if proxies.len() < 2 {
        bail!(InvalidArgument, "ProxyNCA needs at least 2 proxies");
    }
    if proxies.iter().any(|p| p.len() != dim) {
        bail!(Shape, "proxy dimension differs from embedding dimension {dim}");
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= proxies.len()) {
        bail!(InvalidArgument, "label {bad} has no proxy (bank holds {})", proxies.len());
    }
    if embeddings.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let s = config.proxy_scale;
    let prep = |v: &[f64]| -> (Vec<f64>, f64) {
        if config.proxy_normalize {
            let (u, n) = normalize(v);
            (u.into_iter().map(|x| x * s).collect(), n)
        } else {
            (v.iter().map(|x| x * s).collect(), 1.0)
        }
    };
    let (qs, q_norms): (Vec<Vec<f64>>, Vec<f64>) = proxies.iter().map(|p| prep(p)).unzip();
    let m = embeddings.len() as f64;
    let mut total = 0.0;
    let mut grad_u = vec![vec![0.0; dim]; embeddings.len()];
    let mut grad_q = vec![vec![0.0; dim]; proxies.len()];
    let mut us = Vec::with_capacity(embeddings.len());
    let mut u_norms = Vec::with_capacity(embeddings.len());
    for (i, (x, &y)) in embeddings.iter().zip(labels).enumerate() {
        let (u, un) = prep(x);
        let y = y as usize;
        let d: Vec<f64> = qs.iter().map(|q| squared_distance(&u, q)).collect();
        let others: Vec<f64> = (0..qs.len()).filter(|&z| z != y).map(|z| -d[z]).collect();
        let lse = log_sum_exp(&others);
        total += d[y] + lse;
        for z in 0..qs.len() {
            let coeff = if z == y { 1.0 } else { -math::exp(-d[z] - lse) };
            for k in 0..dim {
                let diff = 2.0 * (u[k] - qs[z][k]) * coeff / m;
                grad_u[i][k] += diff;
                grad_q[z][k] -= diff;
            }
        }
        us.push(u);
        u_norms.push(un);
    }
    let back = |v: &[f64], n: f64, g: &[f64]| -> Vec<f64> {
        if config.proxy_normalize {
            let unit: Vec<f64> = v.iter().map(|x| x / s).collect();
            normalize_backward(&unit, n, &g.iter().map(|x| x * s).collect::<Vec<_>>())
        } else {
            g.iter().map(|x| x * s).collect()
        }
    };
    let grad_embeddings = (0..us.len()).map(|i| back(&us[i], u_norms[i], &grad_u[i])).collect();
    let grad_proxies = (0..qs.len()).map(|z| back(&qs[z], q_norms[z], &grad_q[z])).collect();
    Ok(LossOutput { loss: total / m, grad_embeddings, grad_proxies: Some(grad_proxies), active: 0, mined: 0 })
}

/// Index of the nearest proxy (by normalized distance) for each embedding.
pub fn nearest_proxy(embeddings: &[Vec<f64>], proxies: &[Vec<f64>]) -> Vec<usize> {
    let units: Vec<Vec<f64>> = proxies.iter().map(|p| normalize(p).0).collect();
    embeddings
        .iter()
        .map(|e| {
            let u = normalize(e).0;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (z, p) in units.iter().enumerate() {
                let d = squared_distance(&u, p);
                if d < best_d {
                    best_d = d;
                    best = z;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Floor on the relative-error denominator so exact zeros compare on an
/// absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares analytic gradients to central differences of `f` at `x`.
/// `f` returns `(value, gradient)` for a flat parameter vector.
pub fn gradient_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64], step: f64) -> GradCheckReport {
    let (_, analytic) = f(x);
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe).0;
        probe[i] = x[i] - step;
        let minus = f(&probe).0;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport { max_relative_error: max_rel, max_absolute_error: max_abs, checked: x.len() }
}

/// Splits a flat vector into `n` rows of `dim`.
pub fn unflatten(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}
