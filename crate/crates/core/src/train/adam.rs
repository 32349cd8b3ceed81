use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            hyper: AdamHyper::default(),
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One moment slot per weight tensor and per bias vector, in layer order.
    pub fn for_network(net: &Network<T>) -> Self {
        Self::new(&Self::network_sizes(net))
    }

    pub fn network_sizes(net: &Network<T>) -> Vec<usize> {
        net.layers()
            .iter()
            .flat_map(|(_, p)| [p.weight.len(), p.bias.len()])
            .collect()
    }

    fn check_sizes(&self, sizes: impl ExactSizeIterator<Item = usize>) -> Result<()> {
        let ok = sizes.len() == self.m.len()
            && sizes.zip(&self.m).all(|(n, m)| n == m.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("optimizer state does not match parameters".into()))
        }
    }

    /// Bias-corrected Adam update of every slice. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        self.check_sizes(params.iter().map(|p| p.len()))?;
        self.check_sizes(grads.iter().map(|g| g.len()))?;
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter slot {i}"),
            });
        }
        self.step += 1;
        let k = self.coefficients(lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            update(&k, p, g, &mut self.m[i], &mut self.v[i]);
        }
        Ok(())
    }

    /// Applies one update to a network from its accumulated gradients.
    pub fn step_network(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        self.check_sizes(Self::network_sizes(net).into_iter())?;
        for (name, p) in net.layers() {
            if !p.grad_weight.all_finite() || p.grad_bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
        }
        self.step += 1;
        let k = self.coefficients(lr);
        for (i, p) in net.layers_mut().into_iter().enumerate() {
            let (mw, mb) = pair_mut(&mut self.m, 2 * i);
            let (vw, vb) = pair_mut(&mut self.v, 2 * i);
            update(&k, p.weight.data_mut(), p.grad_weight.data(), mw, vw);
            update(&k, &mut p.bias, &p.grad_bias, mb, vb);
        }
        Ok(())
    }

    fn coefficients(&self, lr: f64) -> Coefficients<T> {
        let h = self.hyper;
        let t = self.step as i32;
        Coefficients {
            beta1: T::from_f64_lossy(h.beta1),
            beta2: T::from_f64_lossy(h.beta2),
            one_minus_beta1: T::from_f64_lossy(1.0 - h.beta1),
            one_minus_beta2: T::from_f64_lossy(1.0 - h.beta2),
            correction1: T::from_f64_lossy(1.0 - h.beta1.powi(t)),
            correction2: T::from_f64_lossy(1.0 - h.beta2.powi(t)),
            lr: T::from_f64_lossy(lr),
            eps: T::from_f64_lossy(h.eps),
        }
    }
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = v[i..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

struct Coefficients<T> {
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    correction1: T,
    correction2: T,
    lr: T,
    eps: T,
}

fn update<T: Scalar>(k: &Coefficients<T>, theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = k.beta1 * *m + k.one_minus_beta1 * g;
        *v = k.beta2 * *v + k.one_minus_beta2 * g * g;
        let m_hat = *m / k.correction1;
        let v_hat = *v / k.correction2;
        *p = *p - k.lr * m_hat / (v_hat.sqrt() + k.eps);
    }
}
