//! Identity-labelled image datasets: loaders, a synthetic generator, and
//! train/query/gallery splitting.

pub mod blobs;
pub mod folder;
pub mod idx;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blobs::{make_blobs, SyntheticBlobConfig};
pub use folder::{load_image_folder, parse_benchmark_name, FolderReport};
pub use idx::load_idx;

/// Identity label reserved for junk images.
pub const JUNK_IDENTITY: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, channel-major.
    pub image: Tensor,
    pub identity: i64,
    pub camera: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    samples: Vec<Sample>,
    index: BTreeMap<i64, Vec<usize>>,
    split: SplitTag,
}

impl IdentityDataset {
    pub fn new(samples: Vec<Sample>, split: SplitTag) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples
                .iter()
                .find(|s| s.image.shape() != first.image.shape())
            {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: first.image.shape().to_vec(),
                    rhs: bad.image.shape().to_vec(),
                });
            }
        }
        let mut index: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.identity != JUNK_IDENTITY {
                index.entry(s.identity).or_default().push(i);
            }
        }
        Ok(IdentityDataset {
            samples,
            index,
            split,
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

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn with_tag(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Identity to sample indices, junk excluded.
    pub fn identity_index(&self) -> &BTreeMap<i64, Vec<usize>> {
        &self.index
    }

    pub fn identities(&self) -> Vec<i64> {
        self.index.keys().copied().collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn labels(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn cameras(&self) -> Option<Vec<i64>> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        IdentityDataset::new(samples, split).expect("subset keeps image shape")
    }

    /// Per-channel mean and population standard deviation over all pixels.
    pub fn channel_stats(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let shape = self.image_shape()?;
        let c = shape[0];
        let plane: usize = shape[1..].iter().product();
        let n = (self.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        for s in &self.samples {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += s.image.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for s in &self.samples {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += s.image.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Some((mean, std))
    }

    /// `(x - mean) / std` per channel; channels with zero spread are only centred.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        for s in &mut self.samples {
            let plane = s.image.len() / mean.len();
            for (i, v) in s.image.data_mut().iter_mut().enumerate() {
                let ch = i / plane;
                let scale = if std[ch] > 0.0 { std[ch] } else { 1.0 };
                *v = (*v - mean[ch]) / scale;
            }
        }
    }

    /// Images stacked into one `[N, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&items)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Train and test identities are disjoint. Each test identity gives
    /// `queries_per_identity` samples to the query set and the rest to the
    /// gallery.
    IdentityDisjoint {
        train_fraction: f64,
        queries_per_identity: usize,
        seed: u64,
    },
    /// Every class appears in train and test; sample indices are disjoint.
    ClassShared {
        train: usize,
        query: usize,
        gallery: usize,
        seed: u64,
    },
}

pub struct Split {
    pub train: IdentityDataset,
    pub query: IdentityDataset,
    pub gallery: IdentityDataset,
}

pub fn split(dataset: &IdentityDataset, policy: &SplitPolicy) -> Result<Split> {
    match *policy {
        SplitPolicy::IdentityDisjoint {
            train_fraction,
            queries_per_identity,
            seed,
        } => {
            if !(0.0..1.0).contains(&train_fraction) || queries_per_identity == 0 {
                return Err(Error::invalid(
                    "identity-disjoint split needs train_fraction in [0, 1) and at least one query per identity",
                ));
            }
            let mut ids = dataset.identities();
            if ids.len() < 2 {
                return Err(Error::Data(format!(
                    "identity-disjoint split needs at least 2 identities, found {}",
                    ids.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
            let n_train = n_train.min(ids.len() - 1);
            let (train_ids, test_ids) = ids.split_at(n_train);
            let mut train = Vec::new();
            for id in train_ids {
                train.extend_from_slice(&dataset.index[id]);
            }
            let (mut query, mut gallery) = (Vec::new(), Vec::new());
            for id in test_ids {
                let members = &dataset.index[id];
                if members.len() <= queries_per_identity {
                    return Err(Error::Data(format!(
                        "identity {id} has {} samples, needs more than {queries_per_identity} to supply query and gallery",
                        members.len()
                    )));
                }
                query.extend_from_slice(&members[..queries_per_identity]);
                gallery.extend_from_slice(&members[queries_per_identity..]);
            }
            train.sort_unstable();
            query.sort_unstable();
            gallery.sort_unstable();
            Ok(Split {
                train: dataset.subset(&train, SplitTag::Train),
                query: dataset.subset(&query, SplitTag::Query),
                gallery: dataset.subset(&gallery, SplitTag::Gallery),
            })
        }
        SplitPolicy::ClassShared {
            train,
            query,
            gallery,
            seed,
        } => {
            let needed = train + query + gallery;
            if needed > dataset.len() || query == 0 || gallery == 0 {
                return Err(Error::Data(format!(
                    "class-shared split needs {needed} samples (query and gallery non-empty), dataset has {}",
                    dataset.len()
                )));
            }
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut tr = order[..train].to_vec();
            let mut q = order[train..train + query].to_vec();
            let mut g = order[train + query..needed].to_vec();
            tr.sort_unstable();
            q.sort_unstable();
            g.sort_unstable();
            let gallery_ids: std::collections::BTreeSet<i64> =
                g.iter().map(|&i| dataset.samples[i].identity).collect();
            if let Some(&missing) = q
                .iter()
                .find(|&&i| !gallery_ids.contains(&dataset.samples[i].identity))
            {
                return Err(Error::Data(format!(
                    "query identity {} has no gallery sample; enlarge the gallery",
                    dataset.samples[missing].identity
                )));
            }
            Ok(Split {
                train: dataset.subset(&tr, SplitTag::Train),
                query: dataset.subset(&q, SplitTag::Query),
                gallery: dataset.subset(&g, SplitTag::Gallery),
            })
        }
    }
}
