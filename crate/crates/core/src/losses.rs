//! Label-smoothed ID loss, batch-hard triplet loss and center loss, built
//! from differentiable graph primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_CENTER_WEIGHT: f64 = 0.0005;
pub const DEFAULT_CENTER_LR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSmoothConfig {
    pub epsilon: f64,
    pub num_classes: usize,
}

impl LabelSmoothConfig {
    pub fn new(epsilon: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "label smoothing epsilon must lie in [0, 1), got {epsilon}"
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("label smoothing needs at least one class"));
        }
        Ok(LabelSmoothConfig {
            epsilon,
            num_classes,
        })
    }
}

/// Target distribution for class `y`: `1 - eps (N-1)/N` on `y`, `eps/N` elsewhere.
pub fn smooth_targets(y: usize, cfg: &LabelSmoothConfig) -> Result<Vec<f64>> {
    let n = cfg.num_classes;
    if y >= n {
        return Err(Error::invalid(format!(
            "class {y} out of range for {n} classes"
        )));
    }
    if !(0.0..1.0).contains(&cfg.epsilon) {
        return Err(Error::invalid(format!(
            "label smoothing epsilon must lie in [0, 1), got {}",
            cfg.epsilon
        )));
    }
    let nf = n as f64;
    let off = cfg.epsilon / nf;
    let mut q = vec![off; n];
    q[y] = 1.0 - (nf - 1.0) / nf * cfg.epsilon;
    Ok(q)
}

/// Mean over the batch of `-sum_i q_i log softmax(logits)_i`.
pub fn id_loss(
    g: &mut Graph,
    logits: Var,
    classes: &[usize],
    cfg: &LabelSmoothConfig,
) -> Result<Var> {
    let t = g.value(logits);
    if t.shape().len() != 2 || t.shape()[1] != cfg.num_classes || t.shape()[0] != classes.len() {
        return Err(Error::ShapeMismatch {
            op: "id_loss",
            lhs: t.shape().to_vec(),
            rhs: vec![classes.len(), cfg.num_classes],
        });
    }
    if !t.all_finite() {
        return Err(Error::invalid("id_loss received non-finite logits"));
    }
    let mut q = Vec::with_capacity(t.len());
    for &y in classes {
        q.extend(smooth_targets(y, cfg)?);
    }
    let targets = g.constant(Tensor::new(t.shape().to_vec(), q)?);
    let log_p = g.log_softmax(logits)?;
    let weighted = g.mul(log_p, targets)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / classes.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: DEFAULT_MARGIN,
        }
    }
}

/// `[d_p - d_n + margin]_+`.
pub fn triplet_hinge(d_p: f64, d_n: f64, margin: f64) -> f64 {
    (d_p - d_n + margin).max(0.0)
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_p: f64,
    pub d_n: f64,
}

/// Per anchor, the farthest same-label sample and the nearest other-label
/// sample under the `[B, B]` distance matrix. Anchors without a positive are
/// skipped. Ties go to the lower index.
pub fn mine_batch_hard(dist: &Tensor, labels: &[i64]) -> Result<Vec<MinedTriplet>> {
    let b = labels.len();
    if dist.shape() != [b, b] {
        return Err(Error::ShapeMismatch {
            op: "mine_batch_hard",
            lhs: dist.shape().to_vec(),
            rhs: vec![b, b],
        });
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::invalid(
            "batch-hard mining needs at least two identities (no negatives)",
        ));
    }
    let mut mined = Vec::with_capacity(b);
    for a in 0..b {
        let row = dist.row(a);
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for (j, &d) in row.iter().enumerate() {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, d_p)), Some((n, d_n))) = (pos, neg) {
            mined.push(MinedTriplet {
                anchor: a,
                positive: p,
                negative: n,
                d_p,
                d_n,
            });
        }
    }
    if mined.is_empty() {
        return Err(Error::invalid(
            "batch-hard mining found no anchor with a positive",
        ));
    }
    Ok(mined)
}

/// Mean over anchors of `[d_p - d_n + margin]_+` with batch-hard mining on
/// Euclidean distances between the rows of `features`.
pub fn batch_hard_triplet(
    g: &mut Graph,
    features: Var,
    labels: &[i64],
    cfg: &TripletConfig,
) -> Result<Var> {
    if g.shape(features).first() != Some(&labels.len()) {
        return Err(Error::ShapeMismatch {
            op: "batch_hard_triplet",
            lhs: g.shape(features).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if cfg.margin < 0.0 {
        return Err(Error::invalid("triplet margin must be non-negative"));
    }
    let dist = g.pairwise_distance(features)?;
    let mined = mine_batch_hard(g.value(dist), labels)?;
    let b = labels.len();
    let pos_idx: Vec<usize> = mined.iter().map(|m| m.anchor * b + m.positive).collect();
    let neg_idx: Vec<usize> = mined.iter().map(|m| m.anchor * b + m.negative).collect();
    let d_p = g.gather(dist, &pos_idx)?;
    let d_n = g.gather(dist, &neg_idx)?;
    let diff = g.sub(d_p, d_n)?;
    let shifted = g.add_scalar(diff, cfg.margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// One learned center per training identity.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    /// `[N, D]`
    pub centers: Tensor,
    /// Step size of the count-normalized center update.
    pub lr: f64,
}

impl CenterBank {
    pub fn new(num_classes: usize, dim: usize, lr: f64) -> Self {
        CenterBank {
            centers: Tensor::zeros(&[num_classes, dim]),
            lr,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    /// `c_j <- c_j - lr * sum_{i: y_i = j} (c_j - f_i) / (1 + n_j)` for every
    /// class present in the batch; other centers are left alone.
    pub fn update(&mut self, features: &Tensor, classes: &[usize]) -> Result<()> {
        let d = self.dim();
        if features.shape() != [classes.len(), d] {
            return Err(Error::ShapeMismatch {
                op: "update_centers",
                lhs: features.shape().to_vec(),
                rhs: vec![classes.len(), d],
            });
        }
        let n = self.num_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!(
                "class {bad} outside a bank of {n} centers"
            )));
        }
        let mut delta = vec![0.0; n * d];
        let mut count = vec![0usize; n];
        for (i, &c) in classes.iter().enumerate() {
            count[c] += 1;
            let center = self.centers.row(c);
            for k in 0..d {
                delta[c * d + k] += center[k] - features.row(i)[k];
            }
        }
        let lr = self.lr;
        let data = self.centers.data_mut();
        for c in 0..n {
            if count[c] == 0 {
                continue;
            }
            let denom = 1.0 + count[c] as f64;
            for k in 0..d {
                data[c * d + k] -= lr * delta[c * d + k] / denom;
            }
        }
        Ok(())
    }
}

/// `1/2 * sum_j ||f_j - c_{y_j}||^2`, summed (not averaged) over the batch.
pub fn center_loss(g: &mut Graph, features: Var, centers: Var, classes: &[usize]) -> Result<Var> {
    let (fs, cs) = (g.shape(features).to_vec(), g.shape(centers).to_vec());
    if fs.len() != 2 || cs.len() != 2 || fs[1] != cs[1] || fs[0] != classes.len() {
        return Err(Error::ShapeMismatch {
            op: "center_loss",
            lhs: fs,
            rhs: cs,
        });
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= cs[0]) {
        return Err(Error::invalid(format!(
            "class {bad} outside a bank of {} centers",
            cs[0]
        )));
    }
    let picked = g.gather_rows(centers, classes)?;
    let diff = g.sub(features, picked)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the center loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: DEFAULT_CENTER_WEIGHT,
        }
    }
}

/// Individual loss values of one iteration and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
    pub total: f64,
}

/// `L = L_ID + L_Tri + beta * L_C`.
pub fn total_loss(id: f64, triplet: f64, center: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        id,
        triplet,
        center,
        total: id + triplet + w.beta * center,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn smoothing_targets() {
        let cfg = LabelSmoothConfig::new(0.1, 10).unwrap();
        let q = smooth_targets(3, &cfg).unwrap();
        assert!((q[3] - 0.91).abs() < 1e-15);
        assert!(q
            .iter()
            .enumerate()
            .all(|(i, &v)| i == 3 || (v - 0.01).abs() < 1e-15));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let one_hot = smooth_targets(2, &LabelSmoothConfig::new(0.0, 4).unwrap()).unwrap();
        assert_eq!(one_hot, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(LabelSmoothConfig::new(1.0, 4).is_err());
        assert!(smooth_targets(4, &LabelSmoothConfig::new(0.0, 4).unwrap()).is_err());
    }

    #[test]
    fn id_loss_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = id_loss(&mut g, z, &[0, 3], &LabelSmoothConfig::new(0.0, 4).unwrap()).unwrap();
        assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::zeros(&[1, 10]));
        let l = id_loss(&mut g, z, &[7], &LabelSmoothConfig::new(0.1, 10).unwrap()).unwrap();
        assert!((scalar(&g, l) - 10f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::new(vec![1, 3], vec![0.0, 50.0, 0.0]).unwrap());
        let l = id_loss(&mut g, z, &[1], &LabelSmoothConfig::new(0.0, 3).unwrap()).unwrap();
        assert!(scalar(&g, l) < 1e-20);

        let z = g.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(id_loss(&mut g, z, &[1], &LabelSmoothConfig::new(0.0, 2).unwrap()).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert!((triplet_hinge(0.3, 0.5, 0.3) - 0.1).abs() < 1e-12);
        assert!((triplet_hinge(1.3, 1.5, 0.3) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn batch_hard_on_a_line() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 5.0]).unwrap());
        let l = batch_hard_triplet(&mut g, x, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        // anchors: 0 -> [1-2+.3]=0, 1 -> [1-1+.3]=.3, 2 -> [3-1+.3]=2.3, 5 -> [3-4+.3]=0
        assert!((scalar(&g, l) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn batch_hard_rejects_single_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap());
        assert!(batch_hard_triplet(&mut g, x, &[4, 4, 4], &TripletConfig::default()).is_err());
        let y = g.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap());
        assert!(batch_hard_triplet(&mut g, y, &[1, 2, 3], &TripletConfig::default()).is_err());
    }

    #[test]
    fn center_loss_values() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let l = center_loss(&mut g, f, c, &[0, 0]).unwrap();
        assert_eq!(scalar(&g, l), 0.5);
        let f2 = g.scale(f, 2.0);
        let l2 = center_loss(&mut g, f2, c, &[0, 0]).unwrap();
        assert_eq!(scalar(&g, l2), 2.0);
        let l0 = center_loss(&mut g, c, c, &[0]).unwrap();
        assert_eq!(scalar(&g, l0), 0.0);
        assert!(center_loss(&mut g, f, c, &[0, 1]).is_err());
    }

    #[test]
    fn center_update_rule() {
        let mut bank = CenterBank::new(2, 2, 1.0);
        bank.centers = Tensor::new(vec![2, 2], vec![2.0, 2.0, 5.0, 5.0]).unwrap();
        let f = Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap();
        bank.update(&f, &[0]).unwrap();
        // c - (c - f)/2
        assert_eq!(bank.centers.row(0), &[1.0, 3.0]);
        assert_eq!(bank.centers.row(1), &[5.0, 5.0]);
        assert!(bank.update(&f, &[2]).is_err());
    }

    #[test]
    fn repeated_center_updates_reach_batch_mean() {
        let mut bank = CenterBank::new(1, 2, DEFAULT_CENTER_LR);
        let f = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 3.0, 6.0, 3.0]).unwrap();
        for _ in 0..200 {
            bank.update(&f, &[0, 0, 0]).unwrap();
        }
        assert!((bank.centers.row(0)[0] - 3.0).abs() < 1e-9);
        assert!((bank.centers.row(0)[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.5, 100.0, &w).total - 1.55).abs() < 1e-12);
        assert_eq!(
            total_loss(1.0, 0.5, 100.0, &LossWeights { beta: 0.0 }).total,
            1.5
        );
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).total, 0.0);
    }
}
