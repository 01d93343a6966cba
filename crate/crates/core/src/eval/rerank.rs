//! k-reciprocal re-ranking: Jaccard distance between k-reciprocal neighbor
//! encodings with local query expansion, blended with the original distance.

use serde::{Deserialize, Serialize};

use super::{distance_matrix, ranking, Metric};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the blend.
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

/// Entries of `rank[i][..=k]` whose own top-`k+1` list contains `i`, in
/// rank order.
fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&f| rank[f][..=k].contains(&i))
        .collect()
}

/// k-reciprocal neighbors of item `i` under a square distance matrix (the
/// item itself included, as it ranks first).
pub fn k_reciprocal_neighbors(dist: &Tensor, i: usize, k: usize) -> Result<Vec<usize>> {
    let n = dist.rows();
    if dist.shape() != [n, n] || i >= n || k >= n {
        return Err(Error::invalid(format!(
            "k-reciprocal neighbors need a square matrix, i < n and k < n (shape {:?}, i {i}, k {k})",
            dist.shape()
        )));
    }
    let rank: Vec<Vec<usize>> = (0..n).map(|r| ranking(dist.row(r))).collect();
    Ok(reciprocal(&rank, i, k))
}

/// Re-ranked `[Q, G]` distances from the `[Q+G, Q+G]` matrix over queries
/// followed by gallery items.
pub fn rerank_distances(full: &Tensor, num_query: usize, cfg: &RerankConfig) -> Result<Tensor> {
    let n = full.rows();
    if full.shape() != [n, n] || num_query == 0 || num_query >= n {
        return Err(Error::invalid(format!(
            "re-ranking needs a square matrix over queries then gallery (shape {:?}, {num_query} queries)",
            full.shape()
        )));
    }
    let gallery = n - num_query;
    if !(cfg.k2 >= 1 && cfg.k1 > cfg.k2) {
        return Err(Error::config(
            "rerank.k1",
            format!("need k1 > k2 >= 1, got k1 {} k2 {}", cfg.k1, cfg.k2),
        ));
    }
    if cfg.k1 >= gallery {
        return Err(Error::config(
            "rerank.k1",
            format!("k1 {} must be below the gallery size {gallery}", cfg.k1),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::config("rerank.lambda", "must lie in [0, 1]"));
    }

    // Squared distances, each row scaled by its maximum.
    let mut orig = vec![0.0; n * n];
    for i in 0..n {
        let row = full.row(i);
        let max = row.iter().map(|d| d * d).fold(0.0, f64::max);
        for j in 0..n {
            orig[i * n + j] = if max > 0.0 {
                row[j] * row[j] / max
            } else {
                0.0
            };
        }
    }
    let rank: Vec<Vec<usize>> = (0..n).map(|i| ranking(&orig[i * n..(i + 1) * n])).collect();
    let half = (cfg.k1 as f64 / 2.0).round_ties_even() as usize;

    // Sparse encodings, sorted by column.
    let mut v: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = reciprocal(&rank, i, cfg.k1);
        let mut expanded = base.clone();
        for &cand in &base {
            let cand_set = reciprocal(&rank, cand, half);
            let overlap = cand_set.iter().filter(|c| base.contains(c)).count();
            if overlap as f64 > 2.0 / 3.0 * cand_set.len() as f64 {
                expanded.extend_from_slice(&cand_set);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-orig[i * n + j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        v.push(
            expanded
                .into_iter()
                .zip(weights)
                .map(|(j, w)| (j, w / total))
                .collect(),
        );
    }

    if cfg.k2 != 1 {
        let mut dense = vec![0.0; n];
        let mut expanded = Vec::with_capacity(n);
        for i in 0..n {
            dense.fill(0.0);
            for &nb in &rank[i][..cfg.k2] {
                for &(j, w) in &v[nb] {
                    dense[j] += w;
                }
            }
            let row: Vec<(usize, f64)> = dense
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, w / cfg.k2 as f64))
                .collect();
            expanded.push(row);
        }
        v = expanded;
    }

    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate() {
        for &(j, w) in row {
            inverted[j].push((r, w));
        }
    }

    let mut out = Vec::with_capacity(num_query * gallery);
    let mut shared = vec![0.0; n];
    for i in 0..num_query {
        shared.fill(0.0);
        for &(j, w) in &v[i] {
            for &(r, wr) in &inverted[j] {
                shared[r] += w.min(wr);
            }
        }
        for g in num_query..n {
            let jaccard = 1.0 - shared[g] / (2.0 - shared[g]);
            out.push(jaccard * (1.0 - cfg.lambda) + orig[i * n + g] * cfg.lambda);
        }
    }
    Tensor::new(vec![num_query, gallery], out)
}

/// Re-ranked query-to-gallery distances for embeddings under `metric`.
pub fn rerank(
    query: &Tensor,
    gallery: &Tensor,
    metric: Metric,
    cfg: &RerankConfig,
) -> Result<Tensor> {
    let all = Tensor::new(
        vec![
            query.rows() + gallery.rows(),
            query.shape().get(1).copied().unwrap_or(0),
        ],
        [query.data(), gallery.data()].concat(),
    )?;
    if gallery.shape().get(1) != query.shape().get(1) {
        return Err(Error::ShapeMismatch {
            op: "rerank",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let full = distance_matrix(&all, &all, metric)?;
    rerank_distances(&full, query.rows(), cfg)
}
