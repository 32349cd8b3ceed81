use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::config::{lr_schedule, TrainConfig};
use super::sampler::{sample_patches, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, psnr, LossConfig};
use crate::net::Network;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub batch_psnr_db: f64,
}

impl LogEntry {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,batch_psnr_db";

    pub fn to_csv(&self) -> String {
        format!("{},{:e},{:.8},{:.4}", self.iter, self.lr, self.loss, self.batch_psnr_db)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    /// Entries emitted every `checkpoint_every` iterations and at the end.
    pub log: Vec<LogEntry>,
}

impl TrainReport {
    /// Mean loss over the first `n` iterations.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[..n].iter().sum::<f64>() / n as f64
    }

    /// Mean loss over the last `n` iterations.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
    }
}

/// Trains `net` in place: forward, combined loss against the clean patch,
/// backward and one Adam step per iteration.
///
/// The rainy patch is the only network input; the clean patch only enters
/// the loss. On a non-finite loss or gradient the network and optimizer are
/// rolled back to the last snapshot (taken every `checkpoint_every`
/// iterations) and [`Error::Diverged`] is returned.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    data: &[ImagePair<T>],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainReport> {
    cfg.validate(&net.config)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let loss_cfg = LossConfig::with_alpha(cfg.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut snapshot = (0, net.clone(), adam.clone());

    for iter in 0..cfg.total_iters {
        if iter % cfg.checkpoint_every == 0 {
            snapshot = (iter, net.clone(), adam.clone());
        }
        let lr = lr_schedule(iter, cfg);
        let batch = sample_patches(data, cfg.batch_size, cfg.patch, &mut rng)?;
        let pass = net.forward_train(&batch.rainy)?;
        let loss = combined_loss(&pass.y, &batch.clean, &loss_cfg)?;

        let step = if loss.value.is_finite() {
            net.zero_grad();
            net.backward(&pass, &loss.grad)
                .and_then(|_| adam.step_network(net, lr))
        } else {
            Err(Error::NonFinite { what: "loss".into() })
        };
        match step {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => {
                let (restored, n, a) = snapshot;
                *net = n;
                *adam = a;
                return Err(Error::Diverged { iter, restored });
            }
            Err(e) => return Err(e),
        }

        report.losses.push(loss.value);
        if iter % cfg.checkpoint_every == 0 || iter + 1 == cfg.total_iters {
            let clamped = pass.y.map(|v| v.max(T::zero()).min(T::one()));
            let entry = LogEntry {
                iter,
                lr,
                loss: loss.value,
                batch_psnr_db: psnr(&clamped, &batch.clean)?,
            };
            on_log(&entry);
            report.log.push(entry);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use crate::tensor::{Shape, Tensor};

    fn tiny_data() -> Vec<ImagePair<f64>> {
        (0..2)
            .map(|k| {
                let clean = Tensor::from_fn(Shape::new(1, 3, 14, 14), |_, c, y, x| {
                    0.3 + 0.2 * ((y + k) as f64 * 0.4).sin() + 0.05 * c as f64 + 0.01 * x as f64
                });
                let rainy = Tensor::from_fn(clean.shape(), |_, c, y, x| {
                    clean.at(0, c, y, x) + if (x + y + k) % 5 == 0 { 0.3 } else { 0.0 }
                });
                ImagePair::new(rainy, clean).unwrap()
            })
            .collect()
    }

    fn tiny_net() -> Network<f64> {
        Network::new(NetworkConfig { num_blocks: 2, max_dilation: 2, channels: 4, ..NetworkConfig::default() }).unwrap()
    }

    fn cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_iters: iters,
            patch: 12,
            checkpoint_every: 5,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_iterations_changes_nothing() {
        let mut net = tiny_net();
        let before = net.clone();
        let mut adam = AdamState::for_network(&net);
        let r = train(&mut net, &mut adam, &tiny_data(), &cfg(0), |_| {}).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = || {
            let mut net = tiny_net();
            let mut adam = AdamState::for_network(&net);
            let r = train(&mut net, &mut adam, &tiny_data(), &cfg(12), |_| {}).unwrap();
            (r, net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a.losses, b.losses);
        assert_eq!(na, nb);
        assert_eq!(a.log.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![0, 5, 10, 11]);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let mut net = tiny_net();
        let mut adam = AdamState::for_network(&net);
        let r = train(&mut net, &mut adam, &tiny_data(), &cfg(80), |_| {}).unwrap();
        assert!(r.tail_mean(10) < r.head_mean(10), "{} vs {}", r.tail_mean(10), r.head_mean(10));
    }

    #[test]
    fn divergence_rolls_back() {
        let mut net = tiny_net();
        let mut adam = AdamState::for_network(&net);
        let mut data = tiny_data();
        for p in &mut data {
            p.clean.fill(f64::NAN);
        }
        let before = net.clone();
        let err = train(&mut net, &mut adam, &data, &cfg(10), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { iter: 0, restored: 0 }));
        assert_eq!(net, before);
    }

    #[test]
    fn empty_dataset() {
        let mut net = tiny_net();
        let mut adam = AdamState::for_network(&net);
        assert!(matches!(train(&mut net, &mut adam, &[], &cfg(1), |_| {}), Err(Error::EmptyDataset)));
    }
}
