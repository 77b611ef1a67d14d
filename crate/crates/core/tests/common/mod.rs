//! Brute-force reference implementations used as test oracles. They follow
//! the textbook definitions directly and share no code with the library.

#![allow(dead_code)]

use rand::Rng;

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// NMI via explicit probability tables and `2·I/(H1+H2)`.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0f64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..kb).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
    let (ha, hb) = (h(&pa), h(&pb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).ln();
            }
        }
    }
    2.0 * mi / (ha + hb)
}

/// Rank position of every item by (distance, index).
fn ordered(row: &[f64], skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| Some(j) != skip).collect();
    // Selection sort: deliberately different from the library's sort.
    for i in 0..idx.len() {
        let mut best = i;
        for j in i + 1..idx.len() {
            let (a, b) = (idx[j], idx[best]);
            if row[a] < row[b] || (row[a] == row[b] && a < b) {
                best = j;
            }
        }
        idx.swap(i, best);
    }
    idx
}

pub fn recall_oracle(points: &[Vec<f64>], labels: &[u32], k: usize) -> f64 {
    let n = points.len();
    let mut hits = 0;
    for q in 0..n {
        let row: Vec<f64> = points.iter().map(|p| dist2(&points[q], p)).collect();
        let top = ordered(&row, Some(q));
        if top.iter().take(k).any(|&j| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Per-query AP (None when nothing is relevant) and first-hit rank, with
/// same-identity-same-camera gallery items removed when `veri` is set.
pub fn query_oracle(
    row: &[f64],
    q: (u32, Option<u32>),
    gallery: &[(u32, Option<u32>)],
    veri: bool,
) -> (Option<f64>, Option<usize>) {
    let order: Vec<usize> = ordered(row, None)
        .into_iter()
        .filter(|&g| !(veri && gallery[g].0 == q.0 && gallery[g].1.is_some() && gallery[g].1 == q.1))
        .collect();
    let relevant: Vec<usize> = (0..order.len()).filter(|&r| gallery[order[r]].0 == q.0).collect();
    if relevant.is_empty() {
        return (None, None);
    }
    let mut ap = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        // precision at this relevant item's rank
        ap += (i + 1) as f64 / (r + 1) as f64;
    }
    (Some(ap / relevant.len() as f64), Some(relevant[0]))
}

/// Returns (mAP, CMC curve) over queries with at least one relevant item.
pub fn map_cmc_oracle(
    dist: &[Vec<f64>],
    queries: &[(u32, Option<u32>)],
    gallery: &[(u32, Option<u32>)],
    veri: bool,
) -> (f64, Vec<f64>) {
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for (q, row) in dist.iter().enumerate() {
        if let (Some(ap), Some(first)) = query_oracle(row, queries[q], gallery, veri) {
            aps.push(ap);
            firsts.push(first);
        }
    }
    if aps.is_empty() {
        return (0.0, vec![0.0; gallery.len()]);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let cmc =
        (1..=gallery.len()).map(|k| firsts.iter().filter(|&&f| f < k).count() as f64 / firsts.len() as f64).collect();
    (map, cmc)
}

/// Points on a small integer grid so that exact distance ties occur.
pub fn random_points<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(0..4) as f64 * 0.5).collect()).collect()
}
