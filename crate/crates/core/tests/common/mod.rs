//! Brute-force oracles shared by the integration test targets.
#![allow(dead_code)]

use bnneck::losses::{batch_hard_triplet, TripletConfig};
use bnneck::tensor::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub dist: Vec<Vec<f64>>,
    pub qid: Vec<i64>,
    pub qcam: Vec<i64>,
    pub gid: Vec<i64>,
    pub gcam: Vec<i64>,
}

/// Straightforward protocol: filter, sort by (distance, index), read off
/// the relevance list.
pub fn oracle(inst: &Instance, use_cams: bool) -> (Vec<f64>, f64, usize) {
    let g = inst.gid.len();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for (qi, row) in inst.dist.iter().enumerate() {
        let mut items: Vec<(f64, usize)> = (0..g)
            .filter(|&j| inst.gid[j] != -1)
            .filter(|&j| {
                !(use_cams && inst.gid[j] == inst.qid[qi] && inst.gcam[j] == inst.qcam[qi])
            })
            .map(|j| (row[j], j))
            .collect();
        items.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rel: Vec<bool> = items
            .iter()
            .map(|&(_, j)| inst.gid[j] == inst.qid[qi])
            .collect();
        let n_rel = rel.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        first_hits.push(rel.iter().position(|&r| r).unwrap() + 1);
        let mut seen = 0;
        let mut total = 0.0;
        for (k, &r) in rel.iter().enumerate() {
            if r {
                seen += 1;
                total += seen as f64 / (k + 1) as f64;
            }
        }
        aps.push(total / n_rel as f64);
    }
    let n = first_hits.len();
    let cmc = (1..=g)
        .map(|k| {
            if n == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&h| h <= k).count() as f64 / n as f64
            }
        })
        .collect();
    let map = if n == 0 {
        0.0
    } else {
        aps.iter().sum::<f64>() / n as f64
    };
    (cmc, map, inst.qid.len() - n)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let q = rng.random_range(1..=20);
    let g = rng.random_range(1..=50);
    let ids = rng.random_range(1..=6);
    let label = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.05) {
            -1
        } else {
            rng.random_range(0..ids)
        }
    };
    Instance {
        // Coarse values so distance ties are common.
        dist: (0..q)
            .map(|_| {
                (0..g)
                    .map(|_| f64::from(rng.random_range(0..8u8)) / 4.0)
                    .collect()
            })
            .collect(),
        qid: (0..q).map(|_| rng.random_range(0..ids)).collect(),
        qcam: (0..q).map(|_| rng.random_range(1..=3)).collect(),
        gid: (0..g).map(|_| label(rng)).collect(),
        gcam: (0..g).map(|_| rng.random_range(1..=3)).collect(),
    }
}

/// Dense, line-by-line transcription of the published re-ranking routine
/// (column-max normalization and transpose included).
pub fn rerank_literal(
    qg: &[Vec<f64>],
    qq: &[Vec<f64>],
    gg: &[Vec<f64>],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let q = qg.len();
    let n = q + gg.len();
    let mut od = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            od[i][j] = match (i < q, j < q) {
                (true, true) => qq[i][j],
                (true, false) => qg[i][j - q],
                (false, true) => qg[j][i - q],
                (false, false) => gg[i - q][j - q],
            }
            .powi(2);
        }
    }
    let col_max: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| od[i][j]).fold(f64::MIN, f64::max))
        .collect();
    let norm: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| od[i][j] / col_max[j]).collect())
        .collect();
    let original: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| norm[j][i]).collect())
        .collect();
    let argsort = |row: &Vec<f64>| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        idx
    };
    let initial_rank: Vec<Vec<usize>> = original.iter().map(argsort).collect();
    let mut v = vec![vec![0.0; n]; n];
    let krec = |i: usize, k: usize| -> Vec<usize> {
        let forward = &initial_rank[i][..k + 1];
        let mut out = Vec::new();
        for &f in forward {
            if initial_rank[f][..k + 1].contains(&i) {
                out.push(f);
            }
        }
        out
    };
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    for i in 0..n {
        let k_reciprocal_index = krec(i, k1);
        let mut expansion = k_reciprocal_index.clone();
        for &candidate in &k_reciprocal_index {
            let cand = krec(candidate, half);
            let inter = cand
                .iter()
                .filter(|c| k_reciprocal_index.contains(c))
                .count();
            if inter as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expansion.extend(cand);
            }
        }
        expansion.sort();
        expansion.dedup();
        let weight: Vec<f64> = expansion.iter().map(|&j| (-original[i][j]).exp()).collect();
        let s: f64 = weight.iter().sum();
        for (&j, w) in expansion.iter().zip(&weight) {
            v[i][j] = w / s;
        }
    }
    if k2 != 1 {
        let mut v_qe = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                v_qe[i][j] =
                    initial_rank[i][..k2].iter().map(|&r| v[r][j]).sum::<f64>() / k2 as f64;
            }
        }
        v = v_qe;
    }
    let mut out = vec![vec![0.0; n - q]; q];
    for i in 0..q {
        let mut temp_min = vec![0.0; n];
        for j in 0..n {
            if v[i][j] != 0.0 {
                for r in 0..n {
                    if v[r][j] != 0.0 {
                        temp_min[r] += v[i][j].min(v[r][j]);
                    }
                }
            }
        }
        for g in q..n {
            let jac = 1.0 - temp_min[g] / (2.0 - temp_min[g]);
            out[i][g - q] = jac * (1.0 - lambda) + original[i][g] * lambda;
        }
    }
    out
}

/// Per-anchor hinge by looping over every pair, with no shared code.
pub fn brute_force_triplet(x: &[Vec<f64>], labels: &[i64], margin: f64) -> Option<f64> {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    };
    let mut hinges = Vec::new();
    for a in 0..x.len() {
        let mut hardest_pos = None::<f64>;
        let mut hardest_neg = None::<f64>;
        for j in 0..x.len() {
            if j == a {
                continue;
            }
            let d = dist(&x[a], &x[j]);
            if labels[j] == labels[a] {
                hardest_pos = Some(hardest_pos.map_or(d, |p| p.max(d)));
            } else {
                hardest_neg = Some(hardest_neg.map_or(d, |n| n.min(d)));
            }
        }
        if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
            hinges.push((p - n + margin).max(0.0));
        }
    }
    (!hinges.is_empty()).then(|| hinges.iter().sum::<f64>() / hinges.len() as f64)
}

pub fn triplet_value(x: &[Vec<f64>], labels: &[i64], margin: f64) -> Option<f64> {
    let d = x[0].len();
    let t = Tensor::new(vec![x.len(), d], x.concat()).unwrap();
    let mut g = Graph::new();
    let v = g.constant(t);
    let l = batch_hard_triplet(&mut g, v, labels, &TripletConfig { margin }).ok()?;
    Some(g.value(l).item().unwrap())
}

pub fn set_partitions(n: usize, max_blocks: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; n];
    fn rec(i: usize, used: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>, max_blocks: i64) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for l in 0..=(used.min(max_blocks - 1)) {
            cur[i] = l;
            rec(i + 1, used.max(l + 1), cur, out, max_blocks);
        }
    }
    rec(1, 1, &mut cur, &mut out, max_blocks as i64);
    out
}
