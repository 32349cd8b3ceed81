//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig, SsimConfig};
use crate::net::{FusionMode, Network, NetworkConfig};
use crate::tensor::{Shape, Tensor};

/// Outcome of a [`grad_check`] sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index of the parameter with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` with `(L(θ + ε e_i) - L(θ - ε e_i)) / 2ε` for every
/// parameter. `theta` is restored before returning.
pub fn grad_check<F>(
    theta: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "one analytic gradient per parameter");
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = loss(theta);
        theta[i] = orig - epsilon;
        let minus = loss(theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss while perturbing parameter {i}"),
            });
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every parameter of `net` against finite differences of
/// `combined_loss(net(x), target)`.
pub fn check_network(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    loss_cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    net.zero_grad();
    let pass = net.forward_train(x)?;
    let loss = combined_loss(&pass.y, target, loss_cfg)?;
    net.backward(&pass, &loss.grad)?;
    let analytic = net.flat_grads();
    let mut theta = net.flat_params();
    let mut probe = net.clone();
    let report = grad_check(&mut theta, &analytic, epsilon, |t| {
        probe.set_flat_params(t).expect("same parameter count");
        probe
            .forward_train(x)
            .and_then(|p| combined_loss(&p.y, target, loss_cfg))
            .map_or(f64::NAN, |l| l.value)
    })?;
    net.zero_grad();
    Ok(report)
}

/// Tiny network used for whole-model gradient checks: 2 blocks, dilations
/// 1..2, 4 channels, one 6x6 RGB input, combined loss with alpha 0.4.
///
/// The 11x11 SSIM window does not fit a 6x6 image, so a 5x5 window with the
/// same sigma is used.
pub fn tiny_network_check(fusion_mode: FusionMode, seed: u64) -> Result<GradCheckReport> {
    let config = NetworkConfig {
        num_blocks: 2,
        max_dilation: 2,
        channels: 4,
        fusion_mode,
        input_channels: 3,
        seed,
    };
    let mut net = Network::<f64>::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = Shape::new(1, 3, 6, 6);
    let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0));
    let target = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0));
    let loss_cfg = LossConfig {
        alpha: 0.4,
        ssim: SsimConfig::with_window(5, 1.5),
    };
    check_network(&mut net, &x, &target, &loss_cfg, 1e-5)
}
