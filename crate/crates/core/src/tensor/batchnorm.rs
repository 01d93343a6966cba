use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running statistics of a batch-norm layer. The affine parameters live with
/// the model weights; this holds only the non-trainable buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- (1 - m) * running + m * batch`, biased variance.
    pub(crate) fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// `[outer, channels, inner]` view of a tensor normalized over every axis
/// except axis 1.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    pub fn for_each_in_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in 0..self.inner {
                f(base + i);
            }
        }
    }
}

/// Per-channel biased mean and variance.
pub(crate) fn batch_stats(x: &[f64], layout: BnLayout) -> (Vec<f64>, Vec<f64>) {
    let n = layout.count() as f64;
    let mut mean = vec![0.0; layout.channels];
    let mut var = vec![0.0; layout.channels];
    for c in 0..layout.channels {
        let mut s = 0.0;
        layout.for_each_in_channel(c, |i| s += x[i]);
        let mu = s / n;
        let mut v = 0.0;
        layout.for_each_in_channel(c, |i| v += (x[i] - mu) * (x[i] - mu));
        mean[c] = mu;
        var[c] = v / n;
    }
    (mean, var)
}
