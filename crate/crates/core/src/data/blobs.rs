//! Synthetic identity datasets: one random template per identity plus
//! seeded Gaussian noise per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{IdentityDataset, Sample, SplitTag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlobConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
    /// Number of cameras to cycle through; 0 leaves camera labels absent.
    pub cameras: usize,
    pub seed: u64,
}

impl Default for SyntheticBlobConfig {
    fn default() -> Self {
        SyntheticBlobConfig {
            identities: 8,
            samples_per_identity: 16,
            image_shape: [1, 16, 16],
            noise: 0.3,
            cameras: 0,
            seed: 0,
        }
    }
}

pub fn make_blobs(cfg: &SyntheticBlobConfig) -> IdentityDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let numel: usize = cfg.image_shape.iter().product();
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(cfg.identities);
    while templates.len() < cfg.identities {
        let t: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        if !templates.contains(&t) {
            templates.push(t);
        }
    }
    let mut samples = Vec::with_capacity(cfg.identities * cfg.samples_per_identity);
    for (id, template) in templates.iter().enumerate() {
        for k in 0..cfg.samples_per_identity {
            let data = template
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + cfg.noise * z
                })
                .collect();
            samples.push(Sample {
                image: Tensor::new(cfg.image_shape.to_vec(), data).expect("template size"),
                identity: id as i64,
                camera: (cfg.cameras > 0).then(|| (k % cfg.cameras) as i64 + 1),
            });
        }
    }
    IdentityDataset::new(samples, SplitTag::Train).expect("uniform shape")
}
