//! Warmup plus step-decay learning-rate schedule, indexed by 1-based epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    /// When false the rate holds at `base_lr` until the first decay.
    pub warmup: bool,
    pub warmup_epochs: usize,
    /// Epochs after which the matching factor applies, ascending.
    pub decay_epochs: Vec<usize>,
    pub decay_factors: Vec<f64>,
    pub total_epochs: usize,
    /// Uniform compression of every breakpoint, rounded up. 1.0 is the
    /// reference schedule.
    pub time_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 3.5e-4,
            warmup: true,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70],
            decay_factors: vec![0.1, 0.1],
            total_epochs: 120,
            time_scale: 1.0,
        }
    }
}

/// `ceil(epochs * scale)`, tolerant of representation error in the product
/// (`10 * 0.3` must give 3, not 4).
fn scaled(epochs: usize, scale: f64) -> usize {
    let x = epochs as f64 * scale;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::config(format!("schedule.{key}"), reason));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr", "must be positive and finite");
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0 && self.time_scale <= 1.0) {
            return bad("time_scale", "must lie in (0, 1]");
        }
        if self.decay_epochs.len() != self.decay_factors.len() {
            return bad("decay_factors", "needs one factor per decay epoch");
        }
        if self.decay_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("decay_factors", "factors must lie in (0, 1]");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs", "must be strictly ascending");
        }
        if self.total_epochs == 0 {
            return bad("total_epochs", "must be positive");
        }
        if self.warmup && self.warmup_epochs == 0 {
            return bad("warmup_epochs", "must be positive when warmup is enabled");
        }
        let last = self.decay_epochs.last().copied().unwrap_or(0);
        if self.warmup
            && self.warmup_epochs > self.decay_epochs.first().copied().unwrap_or(usize::MAX)
        {
            return bad("warmup_epochs", "warmup must end before the first decay");
        }
        if last >= self.total_epochs {
            return bad(
                "decay_epochs",
                "every decay must fall before the last epoch",
            );
        }
        Ok(())
    }

    pub fn effective_total(&self) -> usize {
        scaled(self.total_epochs, self.time_scale)
    }

    pub fn effective_warmup(&self) -> usize {
        scaled(self.warmup_epochs, self.time_scale)
    }

    pub fn effective_decays(&self) -> Vec<usize> {
        self.decay_epochs
            .iter()
            .map(|&e| scaled(e, self.time_scale))
            .collect()
    }

    /// Rate for 1-based epoch `t`.
    pub fn lr_at_epoch(&self, t: usize) -> Result<f64> {
        self.validate()?;
        let total = self.effective_total();
        if t == 0 || t > total {
            return Err(Error::invalid(format!("epoch {t} outside 1..={total}")));
        }
        let warmup = self.effective_warmup();
        if self.warmup && t <= warmup {
            return Ok(self.base_lr * t as f64 / warmup as f64);
        }
        // Dividing by the accumulated reciprocal keeps 0.1-steps exact
        // (3.5e-4 / 100 == 3.5e-6, whereas 3.5e-4 * 0.1 * 0.1 is not).
        let divisor: f64 = self
            .effective_decays()
            .iter()
            .zip(&self.decay_factors)
            .filter(|(&e, _)| t > e)
            .map(|(_, &f)| 1.0 / f)
            .product();
        Ok(self.base_lr / divisor)
    }
}
