//! P identities x K samples per batch, the layout batch-hard mining needs.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PKSamplerConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for PKSamplerConfig {
    fn default() -> Self {
        PKSamplerConfig { p: 8, k: 4 }
    }
}

impl PKSamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config(
                "sampler.p",
                "needs at least 2 identities per batch",
            ));
        }
        if self.k < 2 {
            return Err(Error::config(
                "sampler.k",
                "needs at least 2 samples per identity",
            ));
        }
        Ok(())
    }

    /// `floor(n / (P K))`, at least one.
    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size()).max(1)
    }
}

/// P distinct identities drawn uniformly, then K of each identity's samples
/// without replacement, or with replacement when it has fewer than K.
/// Returned indices are grouped by identity.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    by_identity: &BTreeMap<i64, Vec<usize>>,
    cfg: &PKSamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let ids: Vec<&Vec<usize>> = by_identity.values().filter(|m| !m.is_empty()).collect();
    if ids.len() < cfg.p {
        return Err(Error::Data(format!(
            "PK sampling needs {} identities, dataset has {}",
            cfg.p,
            ids.len()
        )));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size());
    for pick in index::sample(rng, ids.len(), cfg.p).into_vec() {
        let members = ids[pick];
        if members.len() >= cfg.k {
            batch.extend(
                index::sample(rng, members.len(), cfg.k)
                    .into_iter()
                    .map(|i| members[i]),
            );
        } else {
            batch.extend((0..cfg.k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(batch)
}
