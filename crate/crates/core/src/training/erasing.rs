//! Random erasing: overwrite one random rectangle of an image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ErasingFill {
    /// Per-channel mean of the training set, filled in by the trainer.
    DatasetMean,
    /// One value per channel.
    PerChannel(Vec<f64>),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct REAConfig {
    pub probability: f64,
    pub area_min: f64,
    pub area_max: f64,
    /// Aspect ratios are drawn from `[r1, 1/r1]`.
    pub r1: f64,
    pub fill: ErasingFill,
}

impl Default for REAConfig {
    fn default() -> Self {
        REAConfig {
            probability: 0.5,
            area_min: 0.02,
            area_max: 0.4,
            r1: 0.3,
            fill: ErasingFill::DatasetMean,
        }
    }
}

impl REAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("erasing.probability", "must lie in [0, 1]"));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max < 1.0) {
            return Err(Error::config(
                "erasing.area_min",
                "need 0 < area_min <= area_max < 1",
            ));
        }
        if !(self.r1 > 0.0 && self.r1 <= 1.0) {
            return Err(Error::config("erasing.r1", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Rows `top..top + height`, columns `left..left + width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ErasedRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// With probability `p` erase one rectangle of `[C, H, W]` whose rounded
/// extents keep the area fraction in `[area_min, area_max]` and the aspect
/// ratio `height / width` in `[r1, 1/r1]`. Returns the rectangle, or `None`
/// when nothing was erased (skipped by the coin, or no fit in 100 draws).
pub fn random_erase<R: Rng + ?Sized>(
    image: &mut Tensor,
    cfg: &REAConfig,
    rng: &mut R,
) -> Result<Option<ErasedRect>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::InvalidShape {
            op: "random_erase",
            shape: image.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        });
    };
    let fill: Vec<f64> = match &cfg.fill {
        ErasingFill::Constant(v) => vec![*v; c],
        ErasingFill::PerChannel(v) if v.len() == c => v.clone(),
        ErasingFill::PerChannel(v) => {
            return Err(Error::invalid(format!(
                "erasing fill has {} channels, image has {c}",
                v.len()
            )))
        }
        ErasingFill::DatasetMean => {
            return Err(Error::invalid(
                "erasing fill must be resolved to channel means first",
            ))
        }
    };
    if rng.random::<f64>() >= cfg.probability {
        return Ok(None);
    }
    let area = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.random_range(cfg.area_min..=cfg.area_max) * area;
        let aspect = rng.random_range(cfg.r1..=1.0 / cfg.r1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let frac = (eh * ew) as f64 / area;
        let ratio = eh as f64 / ew as f64;
        if frac < cfg.area_min || frac > cfg.area_max || ratio < cfg.r1 || ratio > 1.0 / cfg.r1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let data = image.data_mut();
        for (ch, &v) in fill.iter().enumerate() {
            for y in top..top + eh {
                let row = ch * h * w + y * w;
                data[row + left..row + left + ew].fill(v);
            }
        }
        return Ok(Some(ErasedRect {
            top,
            left,
            height: eh,
            width: ew,
        }));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Tensor {
        Tensor::new(vec![2, 16, 12], (0..384).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let cfg = REAConfig {
            probability: 0.0,
            fill: ErasingFill::Constant(-1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut img = image();
            assert_eq!(random_erase(&mut img, &cfg, &mut rng).unwrap(), None);
            assert_eq!(img, image());
        }
    }

    #[test]
    fn certain_erase_touches_exactly_the_rectangle() {
        let cfg = REAConfig {
            probability: 1.0,
            fill: ErasingFill::Constant(-1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = image();
        let r = random_erase(&mut img, &cfg, &mut rng).unwrap().unwrap();
        let erased = img.data().iter().filter(|&&v| v == -1.0).count();
        assert_eq!(erased, 2 * r.height * r.width);
        let frac = (r.height * r.width) as f64 / (16.0 * 12.0);
        assert!((0.02..=0.4).contains(&frac));
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = REAConfig {
            probability: 1.0,
            fill: ErasingFill::PerChannel(vec![0.5, -0.5]),
            ..Default::default()
        };
        let run = || {
            let mut img = image();
            random_erase(&mut img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            img
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unresolved_fill_is_rejected() {
        let mut img = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_erase(&mut img, &REAConfig::default(), &mut rng).is_err());
    }
}
