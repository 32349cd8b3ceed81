use crate::error::{Error, Result};
use crate::net::NetworkConfig;

/// Training hyperparameters. [`TrainConfig::default`] is the full schedule:
/// batch 10, learning rate 1e-3 divided by 10 at 100K and 200K iterations,
/// 300K iterations on 100x100 patches. [`TrainConfig::desk`] is a short run
/// for small synthetic datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Iterations at which the learning rate is divided by 10.
    pub decay_iters: Vec<usize>,
    pub total_iters: usize,
    pub patch: usize,
    pub alpha: f64,
    /// Seed for patch sampling.
    pub seed: u64,
    /// Log and snapshot interval.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            base_lr: 1e-3,
            decay_iters: vec![100_000, 200_000],
            total_iters: 300_000,
            patch: 100,
            alpha: 0.4,
            seed: 0,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    /// 500 iterations, batch 4, constant learning rate 1e-3, 64x64 patches.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            base_lr: 1e-3,
            decay_iters: Vec::new(),
            total_iters: 500,
            patch: 64,
            alpha: 0.4,
            seed: 0,
            checkpoint_every: 50,
        }
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return fail("batch_size and checkpoint_every must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.decay_iters.windows(2).any(|w| w[0] >= w[1]) {
            return fail("decay_iters must be strictly increasing".into());
        }
        if let Some(&last) = self.decay_iters.last() {
            if last >= self.total_iters {
                return fail(format!("decay point {last} is not below total_iters {}", self.total_iters));
            }
        }
        if self.patch < 2 * net.max_dilation {
            return fail(format!("patch {} is smaller than 2 * max_dilation", self.patch));
        }
        Ok(())
    }
}

/// `base_lr * 10^-k`, where `k` counts the decay points at or before `iteration`.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.decay_iters.iter().filter(|&&d| d <= iteration).count();
    cfg.base_lr * 10f64.powi(-(k as i32))
}
