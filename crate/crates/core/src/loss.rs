//! Training loss and evaluation metrics: MSE, SSIM, their weighted
//! combination, and PSNR. Images are assumed to lie in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_shape<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, op: &'static str) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: y_hat.shape(),
            got: y.shape(),
        });
    }
    Ok(())
}

/// A scalar loss value together with its gradient with respect to the
/// prediction.
#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Mean squared error; gradient `2 (y - y_hat) / count`.
pub fn mse<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<LossValue<T>> {
    same_shape(y, y_hat, "mse")?;
    let count = y.len() as f64;
    let mut sum = 0.0f64;
    let scale = T::from_f64_lossy(2.0 / count);
    let mut grad = Tensor::zeros(y.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(y.data()).zip(y_hat.data()) {
        let d = a - b;
        let d64 = d.to_f64_lossy();
        sum += d64 * d64;
        *g = d * scale;
    }
    Ok(LossValue {
        value: sum / count,
        grad,
    })
}

/// SSIM window and stabilizing constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    /// Separable 1-D Gaussian, normalized to sum 1.
    window: Vec<f64>,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::with_window(11, 1.5)
    }
}

impl SsimConfig {
    /// Gaussian window of odd `size` and standard deviation `sigma`.
    pub fn with_window(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1 && sigma > 0.0, "window size must be odd, sigma positive");
        let half = (size / 2) as f64;
        let raw: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            window: raw.into_iter().map(|v| v / total).collect(),
            sigma,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }

    pub fn window_size(&self) -> usize {
        self.window.len()
    }

    /// The 2-D window weight at `(i, j)`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.window[i] * self.window[j]
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Valid-region Gaussian filtering of an `h x w` plane.
    fn filter(&self, src: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.window.len();
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut tmp = vec![0.0; h * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..ow {
                tmp[y * ow + x] = self.window.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for (i, &g) in self.window.iter().enumerate() {
                let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
                for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                    *o += g * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`SsimConfig::filter`]: spreads a valid-region map back
    /// over the `h x w` plane.
    fn filter_adjoint(&self, map: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.window.len();
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut tmp = vec![0.0; h * ow];
        for y in 0..oh {
            for (i, &g) in self.window.iter().enumerate() {
                let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
                for (d, &v) in dst.iter_mut().zip(&map[y * ow..(y + 1) * ow]) {
                    *d += g * v;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..ow {
                let v = tmp[y * ow + x];
                for (o, &g) in out[y * w + x..y * w + x + k].iter_mut().zip(&self.window) {
                    *o += g * v;
                }
            }
        }
        out
    }
}

/// Mean SSIM over batch, channels and valid window positions, with its
/// gradient with respect to `y`. Channels are treated independently.
pub fn ssim<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, cfg: &SsimConfig) -> Result<LossValue<T>> {
    same_shape(y, y_hat, "ssim")?;
    let s = y.shape();
    let k = cfg.window_size();
    if s.h < k || s.w < k {
        return Err(Error::ImageTooSmall { h: s.h, w: s.w, min: k });
    }
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let valid = (s.h - k + 1) * (s.w - k + 1);
    let count = (s.n * s.c * valid) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = y.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let b: Vec<f64> = y_hat.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
            let mu_a = cfg.filter(&a, s.h, s.w);
            let mu_b = cfg.filter(&b, s.h, s.w);
            let e_aa = cfg.filter(&aa, s.h, s.w);
            let e_bb = cfg.filter(&bb, s.h, s.w);
            let e_ab = cfg.filter(&ab, s.h, s.w);

            // Per-position partials of the map w.r.t. mu_a, E[a^2], E[ab].
            let mut d_mu = vec![0.0; valid];
            let mut d_aa = vec![0.0; valid];
            let mut d_ab = vec![0.0; valid];
            for p in 0..valid {
                let (ma, mb) = (mu_a[p], mu_b[p]);
                let var_a = e_aa[p] - ma * ma;
                let var_b = e_bb[p] - mb * mb;
                let cov = e_ab[p] - ma * mb;
                let a1 = 2.0 * ma * mb + c1;
                let a2 = 2.0 * cov + c2;
                let b1 = ma * ma + mb * mb + c1;
                let b2 = var_a + var_b + c2;
                let den = b1 * b2;
                let map = a1 * a2 / den;
                total += map;
                d_mu[p] = (2.0 * mb * (a2 - a1) - 2.0 * ma * map * (b2 - b1)) / den / count;
                d_aa[p] = -map * b1 / den / count;
                d_ab[p] = 2.0 * a1 / den / count;
            }
            let g_mu = cfg.filter_adjoint(&d_mu, s.h, s.w);
            let g_aa = cfg.filter_adjoint(&d_aa, s.h, s.w);
            let g_ab = cfg.filter_adjoint(&d_ab, s.h, s.w);
            let dst = &mut grad.data_mut()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            for q in 0..plane {
                dst[q] = T::from_f64_lossy(g_mu[q] + 2.0 * a[q] * g_aa[q] + b[q] * g_ab[q]);
            }
        }
    }
    Ok(LossValue {
        value: total / count,
        grad,
    })
}

/// Weight between the MSE and SSIM terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }
}

/// `alpha * MSE + (1 - alpha) * (1 - SSIM)`, averaged over the batch.
pub fn combined_loss<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, cfg: &LossConfig) -> Result<LossValue<T>> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    let m = mse(y, y_hat)?;
    let s = ssim(y, y_hat, &cfg.ssim)?;
    let (wa, wb) = (cfg.alpha, 1.0 - cfg.alpha);
    let (ta, tb) = (T::from_f64_lossy(wa), T::from_f64_lossy(wb));
    let mut grad = m.grad;
    for (g, &gs) in grad.data_mut().iter_mut().zip(s.grad.data()) {
        *g = ta * *g - tb * gs;
    }
    Ok(LossValue {
        value: wa * m.value + wb * (1.0 - s.value),
        grad,
    })
}

/// `10 log10(1 / MSE)` in dB for unit dynamic range; [`PSNR_CAP_DB`] when the
/// images are identical.
pub fn psnr<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    let m = mse(y, y_hat)?.value;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { 10.0 * (1.0 / m).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random::<f64>())
    }

    /// Direct 2-D SSIM without separability, for cross-checking.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> f64 {
        let s = a.shape();
        let k = cfg.window_size();
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let mut total = 0.0;
        let mut count = 0.0;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..=s.h - k {
                    for x in 0..=s.w - k {
                        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..k {
                            for j in 0..k {
                                let g = cfg.weight(i, j);
                                let (p, q) = (a.at(n, c, y + i, x + j), b.at(n, c, y + i, x + j));
                                ma += g * p;
                                mb += g * q;
                                saa += g * p * p;
                                sbb += g * q * q;
                                sab += g * p * q;
                            }
                        }
                        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                        total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        count += 1.0;
                    }
                }
            }
        }
        total / count
    }

    #[test]
    fn window_normalized() {
        let cfg = SsimConfig::default();
        let total: f64 = (0..11).flat_map(|i| (0..11).map(move |j| (i, j))).map(|(i, j)| cfg.weight(i, j)).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(cfg.c1() > 0.0 && cfg.c2() > 0.0);
        assert!((cfg.c1() - 1e-4).abs() < 1e-18);
        assert!((cfg.c2() - 9e-4).abs() < 1e-18);
    }

    #[test]
    fn mse_examples() {
        let s = Shape::new(1, 3, 4, 4);
        let a = random(s, 1);
        assert_eq!(mse(&a, &a).unwrap().value, 0.0);
        let c = Tensor::full(s, 0.3);
        assert!((mse(&c, &Tensor::zeros(s)).unwrap().value - 0.09).abs() < 1e-15);
        let b = random(s, 2);
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 48.0;
        assert!((mse(&a, &b).unwrap().value - direct).abs() < 1e-7);
        assert!(mse(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5))).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let s = Shape::new(2, 3, 16, 13);
        let (a, b) = (random(s, 3), random(s, 4));
        let cfg = SsimConfig::default();
        assert!((ssim(&a, &a, &cfg).unwrap().value - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, &cfg).unwrap().value;
        let ba = ssim(&b, &a, &cfg).unwrap().value;
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab.abs() <= 1.0);
        assert!((ab - ssim_direct(&a, &b, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn ssim_requires_window_sized_images() {
        let s = Shape::new(1, 1, 10, 20);
        let a = random(s, 5);
        assert!(matches!(ssim(&a, &a, &SsimConfig::default()), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_gradient_finite_differences() {
        let s = Shape::new(1, 2, 16, 16);
        let (a, b) = (random(s, 6), random(s, 7));
        let cfg = SsimConfig::default();
        let g = ssim(&a, &b, &cfg).unwrap().grad;
        // Corner pixels only meet the window's tail (|grad| ~ 1e-8). Smaller
        // steps drown them in roundoff, larger ones in truncation error.
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            let mut p = a.clone();
            p.data_mut()[i] += eps;
            let mut m = a.clone();
            m.data_mut()[i] -= eps;
            let num = (ssim(&p, &b, &cfg).unwrap().value - ssim(&m, &b, &cfg).unwrap().value) / (2.0 * eps);
            worst = worst.max(relative_error(g.data()[i], num));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn combined_endpoints() {
        let s = Shape::new(2, 3, 12, 12);
        let (a, b) = (random(s, 8), random(s, 9));
        assert_eq!(combined_loss(&a, &a, &LossConfig::default()).unwrap().value, 0.0);
        let m = mse(&a, &b).unwrap().value;
        let ss = ssim(&a, &b, &SsimConfig::default()).unwrap().value;
        let l1 = combined_loss(&a, &b, &LossConfig::with_alpha(1.0)).unwrap().value;
        let l0 = combined_loss(&a, &b, &LossConfig::with_alpha(0.0)).unwrap().value;
        let l4 = combined_loss(&a, &b, &LossConfig::default()).unwrap().value;
        assert!((l1 - m).abs() < 1e-9);
        assert!((l0 - (1.0 - ss)).abs() < 1e-9);
        assert!((l4 - (0.4 * m + 0.6 * (1.0 - ss))).abs() < 1e-7);
        assert!(combined_loss(&a, &b, &LossConfig::with_alpha(1.5)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let s = Shape::new(1, 1, 10, 10);
        let z = Tensor::<f64>::zeros(s);
        let c = Tensor::full(s, 0.1);
        assert!((psnr(&c, &z).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP_DB);
        let (a, b) = (random(s, 10), random(s, 11));
        let m: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 100.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-6);
    }

    #[test]
    fn noise_lowers_psnr_and_ssim() {
        let s = Shape::new(1, 3, 24, 24);
        let clean = Tensor::from_fn(s, |_, c, y, x| 0.5 + 0.3 * ((y as f64 * 0.3 + c as f64).sin() * (x as f64 * 0.2).cos()));
        let cfg = SsimConfig::default();
        let amps = [0.01, 0.03, 0.1, 0.3];
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = f64::INFINITY;
        for amp in amps {
            let mut ps = 0.0;
            let mut ss = 0.0;
            for trial in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(trial);
                let noisy = Tensor::from_fn(s, |n, c, y, x| clean.at(n, c, y, x) + amp * (rng.random::<f64>() * 2.0 - 1.0));
                ps += psnr(&noisy, &clean).unwrap();
                ss += ssim(&noisy, &clean, &cfg).unwrap().value;
            }
            assert!(ps < last_psnr && ss < last_ssim, "amplitude {amp}");
            last_psnr = ps;
            last_ssim = ss;
        }
    }
}
