//! Retrieval evaluation: distances, single-query CMC and mAP, re-ranking,
//! and embedding-space statistics.

pub mod io;
pub mod rerank;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SplitTag, JUNK_IDENTITY};
use crate::error::{Error, Result};
use crate::model::FeatureKind;
use crate::tensor::Tensor;

pub use rerank::{k_reciprocal_neighbors, rerank, rerank_distances, RerankConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" | "cos" => Ok(Metric::Cosine),
            _ => Err(Error::config(
                "eval.metric",
                format!("unknown metric `{s}`"),
            )),
        }
    }
}

/// Embeddings with their identity and optional camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddingSet {
    /// `[M, D]`
    pub embeddings: Tensor,
    pub identities: Vec<i64>,
    pub cameras: Option<Vec<i64>>,
    pub role: SplitTag,
}

impl LabeledEmbeddingSet {
    pub fn new(
        embeddings: Tensor,
        identities: Vec<i64>,
        cameras: Option<Vec<i64>>,
        role: SplitTag,
    ) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2
            || s[0] != identities.len()
            || cameras.as_ref().is_some_and(|c| c.len() != s[0])
        {
            return Err(Error::InvalidShape {
                op: "embedding set",
                shape: s.to_vec(),
                reason: format!(
                    "need [M, D] with M = {} labels{}",
                    identities.len(),
                    cameras
                        .as_ref()
                        .map_or(String::new(), |c| format!(" and {} cameras", c.len()))
                ),
            });
        }
        Ok(LabeledEmbeddingSet {
            embeddings,
            identities,
            cameras,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `[|A|, |B|]` distances between the rows of `a` and `b`: non-squared L2,
/// or `1 - cos` for the cosine metric.
pub fn distance_matrix(a: &Tensor, b: &Tensor, metric: Metric) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch {
            op: "distance_matrix",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, n) = (sa[0], sb[0]);
    let mut out = Vec::with_capacity(m * n);
    match metric {
        Metric::Euclidean => {
            for i in 0..m {
                let x = a.row(i);
                for j in 0..n {
                    let d2: f64 = x.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                    out.push(d2.sqrt());
                }
            }
        }
        Metric::Cosine => {
            let norms = |t: &Tensor, side: &str| -> Result<Vec<f64>> {
                (0..t.rows())
                    .map(|i| {
                        let v = norm(t.row(i));
                        if v == 0.0 {
                            Err(Error::invalid(format!(
                                "zero-norm {side} row {i} has no cosine distance"
                            )))
                        } else {
                            Ok(v)
                        }
                    })
                    .collect()
            };
            let (na, nb) = (norms(a, "left")?, norms(b, "right")?);
            for i in 0..m {
                let x = a.row(i);
                for j in 0..n {
                    let dot: f64 = x.iter().zip(b.row(j)).map(|(p, q)| p * q).sum();
                    out.push((1.0 - dot / (na[i] * nb[j])).max(0.0));
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gallery order for one query row: ascending distance, ties by index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&x, &y| {
        row[x]
            .partial_cmp(&row[y])
            .unwrap_or(Ordering::Equal)
            .then(x.cmp(&y))
    });
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `std / mean`; absent when the mean norm is zero.
    pub cv: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub d_p: f64,
    pub d_n: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[k - 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub metric: Metric,
    pub feature: Option<FeatureKind>,
    /// Queries scored (with at least one valid match).
    pub queries: usize,
    /// Queries without any valid match, left out of CMC and mAP.
    pub dropped: usize,
    /// Whether same-identity same-camera gallery entries were excluded.
    pub camera_filter: bool,
    /// Parameters when the distances were re-ranked.
    pub rerank: Option<RerankConfig>,
    pub cluster: Option<ClusterStats>,
    pub norms: Option<NormStats>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc
            .get(k - 1)
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }
}

/// CMC and mAP from a precomputed `[Q, G]` distance matrix.
///
/// Per query, gallery entries with the query's identity and camera (when
/// both sides carry cameras) and junk entries are ignored. A query without
/// a remaining true match is dropped and counted.
pub fn evaluate_distances(
    dist: &Tensor,
    query_ids: &[i64],
    query_cams: Option<&[i64]>,
    gallery_ids: &[i64],
    gallery_cams: Option<&[i64]>,
    metric: Metric,
) -> Result<EvalReport> {
    let (q, g) = (query_ids.len(), gallery_ids.len());
    if dist.shape() != [q, g] {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: dist.shape().to_vec(),
            rhs: vec![q, g],
        });
    }
    let cams = match (query_cams, gallery_cams) {
        (Some(qc), Some(gc)) if qc.len() == q && gc.len() == g => Some((qc, gc)),
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "camera labels do not match the label counts",
            ))
        }
        _ => None,
    };
    let mut hits = vec![0usize; g];
    let mut ap_sum = 0.0;
    let mut scored = 0;
    let mut dropped = 0;
    for qi in 0..q {
        let qid = query_ids[qi];
        let mut rank = 0;
        let mut found = 0usize;
        let mut first: Option<usize> = None;
        let mut precision_sum = 0.0;
        for gi in ranking(dist.row(qi)) {
            let gid = gallery_ids[gi];
            if gid == JUNK_IDENTITY {
                continue;
            }
            if let Some((qc, gc)) = cams {
                if gid == qid && gc[gi] == qc[qi] {
                    continue;
                }
            }
            rank += 1;
            if gid == qid && qid != JUNK_IDENTITY {
                found += 1;
                first.get_or_insert(rank);
                precision_sum += found as f64 / rank as f64;
            }
        }
        match first {
            Some(r) => {
                hits[r - 1] += 1;
                ap_sum += precision_sum / found as f64;
                scored += 1;
            }
            None => dropped += 1,
        }
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0;
    for h in hits {
        acc += h;
        cmc.push(if scored == 0 {
            0.0
        } else {
            acc as f64 / scored as f64
        });
    }
    Ok(EvalReport {
        cmc,
        map: if scored == 0 {
            0.0
        } else {
            ap_sum / scored as f64
        },
        metric,
        feature: None,
        queries: scored,
        dropped,
        camera_filter: cams.is_some(),
        rerank: None,
        cluster: None,
        norms: None,
    })
}

pub fn evaluate(
    query: &LabeledEmbeddingSet,
    gallery: &LabeledEmbeddingSet,
    metric: Metric,
) -> Result<EvalReport> {
    let dist = distance_matrix(&query.embeddings, &gallery.embeddings, metric)?;
    evaluate_distances(
        &dist,
        &query.identities,
        query.cameras.as_deref(),
        &gallery.identities,
        gallery.cameras.as_deref(),
        metric,
    )
}

/// Mean distance over unordered same-label pairs (`d_p`) and cross-label
/// pairs (`d_n`), and their ratio.
pub fn cluster_ratio(embeddings: &Tensor, labels: &[i64], metric: Metric) -> Result<ClusterStats> {
    if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cluster_ratio",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let dist = distance_matrix(embeddings, embeddings, metric)?;
    let (mut sp, mut np, mut sn, mut nn) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d = dist.row(i)[j];
            if labels[i] == labels[j] {
                sp += d;
                np += 1;
            } else {
                sn += d;
                nn += 1;
            }
        }
    }
    if nn == 0 {
        return Err(Error::invalid("cluster ratio needs at least two classes"));
    }
    if np == 0 {
        return Err(Error::invalid(
            "cluster ratio needs at least one same-class pair",
        ));
    }
    let (d_p, d_n) = (sp / np as f64, sn / nn as f64);
    if d_n == 0.0 {
        return Err(Error::invalid(
            "inter-class distance is zero, ratio undefined",
        ));
    }
    Ok(ClusterStats {
        d_p,
        d_n,
        r: d_p / d_n,
    })
}

pub fn norm_stats(embeddings: &Tensor) -> Result<NormStats> {
    if embeddings.shape().len() != 2 || embeddings.is_empty() {
        return Err(Error::invalid(
            "norm statistics need a non-empty [M, D] set",
        ));
    }
    let norms: Vec<f64> = (0..embeddings.rows())
        .map(|i| norm(embeddings.row(i)))
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    Ok(NormStats {
        mean,
        std,
        cv: (mean > 0.0).then(|| std / mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn basic_distances() {
        let a = t(2, 2, &[1.0, 0.0, 3.0, 4.0]);
        let b = t(2, 2, &[0.0, 1.0, 6.0, 8.0]);
        let e = distance_matrix(&a, &b, Metric::Euclidean).unwrap();
        assert_eq!(e.row(0)[0], 2f64.sqrt());
        let c = distance_matrix(&a, &b, Metric::Cosine).unwrap();
        assert_eq!(c.row(0)[0], 1.0);
        assert!(c.row(1)[1].abs() < 1e-15);
        assert_eq!(
            distance_matrix(&a, &a, Metric::Euclidean).unwrap().row(1)[1],
            0.0
        );
    }

    #[test]
    fn zero_norm_rejected_with_index() {
        let a = t(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let err = distance_matrix(&a, &a, Metric::Cosine)
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn ap_of_relevance_1_0_1() {
        let d = t(1, 3, &[0.1, 0.2, 0.3]);
        let r = evaluate_distances(&d, &[1], None, &[1, 2, 1], None, Metric::Euclidean).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_two_queries() {
        let d = t(2, 2, &[0.1, 0.2, 0.1, 0.2]);
        let r = evaluate_distances(&d, &[1, 2], None, &[1, 2], None, Metric::Euclidean).unwrap();
        assert_eq!(r.cmc, vec![0.5, 1.0]);
        assert_eq!(r.rank(1), 0.5);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        // Gallery (1,1) is nearest but excluded; (2,1) is a distractor.
        let d = t(1, 3, &[0.0, 0.5, 0.2]);
        let r = evaluate_distances(
            &d,
            &[1],
            Some(&[1]),
            &[1, 1, 2],
            Some(&[1, 2, 1]),
            Metric::Euclidean,
        )
        .unwrap();
        assert_eq!(r.cmc[0], 0.0);
        assert_eq!(r.cmc[1], 1.0);
        assert_eq!(r.map, 0.5);
        let only_same_cam = evaluate_distances(
            &d,
            &[1],
            Some(&[1]),
            &[1, 3, 2],
            Some(&[1, 2, 1]),
            Metric::Euclidean,
        )
        .unwrap();
        assert_eq!((only_same_cam.queries, only_same_cam.dropped), (0, 1));
    }

    #[test]
    fn junk_is_ignored() {
        let d = t(1, 3, &[0.0, 0.1, 0.2]);
        let r = evaluate_distances(&d, &[4], None, &[-1, 4, 5], None, Metric::Euclidean).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn cluster_ratio_on_a_line() {
        let x = t(4, 1, &[0.0, 2.0, 10.0, 12.0]);
        let s = cluster_ratio(&x, &[0, 0, 1, 1], Metric::Euclidean).unwrap();
        assert_eq!((s.d_p, s.d_n, s.r), (2.0, 10.0, 0.2));
        let dup = t(4, 1, &[1.0, 1.0, 5.0, 5.0]);
        assert_eq!(
            cluster_ratio(&dup, &[0, 0, 1, 1], Metric::Euclidean)
                .unwrap()
                .r,
            0.0
        );
        assert!(cluster_ratio(&x, &[0, 0, 0, 0], Metric::Euclidean).is_err());
    }

    #[test]
    fn norm_statistics() {
        let x = t(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let s = norm_stats(&x).unwrap();
        assert_eq!((s.mean, s.std), (3.5, 0.5));
        assert!((s.cv.unwrap() - 0.142857).abs() < 1e-6);
        let same = norm_stats(&t(2, 1, &[2.0, -2.0])).unwrap();
        assert_eq!((same.std, same.cv), (0.0, Some(0.0)));
        assert_eq!(norm_stats(&t(1, 2, &[0.0, 0.0])).unwrap().cv, None);
    }
}
