//! Dilated 2-D convolution, forward and backward.
//!
//! Both passes lower the convolution to a GEMM over an im2col buffer. A 1x1
//! kernel without padding skips the buffer and multiplies the input planes
//! directly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Weights and bias of one convolution, with gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(C_out, C_in, k, k)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        let shape = Shape::new(out_channels, in_channels, kernel, kernel);
        Self {
            weight: Tensor::zeros(shape),
            bias: vec![T::zero(); out_channels],
            grad_weight: Tensor::zeros(shape),
            grad_bias: vec![T::zero(); out_channels],
        }
    }

    /// Zero-mean Gaussian weights with std `sqrt(2 / fan_in)`, zero bias.
    pub fn he_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(out_channels, in_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in p.weight.data_mut() {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        input: Shape,
        params: &ConvParams<T>,
        dilation: usize,
        padding: usize,
        op: &'static str,
    ) -> Result<Self> {
        if input.c != params.in_channels() {
            return Err(Error::ChannelMismatch {
                op,
                expected: params.in_channels(),
                got: input.c,
            });
        }
        let k = params.kernel();
        let span = (dilation * (k - 1)) as isize;
        let out_h = (input.h + 2 * padding) as isize - span;
        let out_w = (input.w + 2 * padding) as isize - span;
        if dilation == 0 || out_h < 1 || out_w < 1 {
            return Err(Error::EmptyOutput {
                op,
                h: out_h,
                w: out_w,
            });
        }
        Ok(Self {
            c_in: input.c,
            h: input.h,
            w: input.w,
            k,
            dilation,
            padding,
            out_h: out_h as usize,
            out_w: out_w as usize,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.padding == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// For kernel offset `i` and output coordinate `o`, the source coordinate
    /// is `o + i*dilation - padding`. Returns the half-open output range whose
    /// source lies inside `[0, size)`.
    fn valid_range(&self, i: usize, size: usize, out: usize) -> (usize, usize) {
        let shift = (i * self.dilation) as isize - self.padding as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((size as isize - shift).max(0) as usize).min(out);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let (k, d, p) = (self.k, self.dilation, self.padding);
        let (ow, oh) = (self.out_w, self.out_h);
        let n_cols = self.cols();
        for c in 0..self.c_in {
            let plane = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..k {
                let (y0, y1) = self.valid_range(i, self.h, oh);
                for j in 0..k {
                    let (x0, x1) = self.valid_range(j, self.w, ow);
                    let row = &mut cols[((c * k + i) * k + j) * n_cols..][..n_cols];
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if oy < y0 || oy >= y1 || x0 >= x1 {
                            dst.fill(T::zero());
                            continue;
                        }
                        let sy = oy + i * d - p;
                        dst[..x0].fill(T::zero());
                        dst[x1..].fill(T::zero());
                        let sx0 = x0 + j * d - p;
                        dst[x0..x1].copy_from_slice(&plane[sy * self.w + sx0..sy * self.w + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let (k, d, p) = (self.k, self.dilation, self.padding);
        let (ow, oh) = (self.out_w, self.out_h);
        let n_cols = self.cols();
        for c in 0..self.c_in {
            let plane = &mut sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..k {
                let (y0, y1) = self.valid_range(i, self.h, oh);
                for j in 0..k {
                    let (x0, x1) = self.valid_range(j, self.w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = &cols[((c * k + i) * k + j) * n_cols..][..n_cols];
                    for oy in y0..y1 {
                        let sy = oy + i * d - p;
                        let sx0 = x0 + j * d - p;
                        let dst = &mut plane[sy * self.w + sx0..sy * self.w + sx0 + (x1 - x0)];
                        for (a, &g) in dst.iter_mut().zip(&row[oy * ow + x0..oy * ow + x1]) {
                            *a = *a + g;
                        }
                    }
                }
            }
        }
    }
}

/// Dilated convolution with zero padding.
///
/// `out[n,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * in[n,c, y + i*d - p, x + j*d - p]`,
/// with out-of-range taps reading zero. For a 3x3 kernel `padding = dilation`
/// keeps the spatial size.
pub fn conv2d_dilated<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    dilation: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = Geometry::new(s, params, dilation, padding, "conv2d_dilated")?;
    let c_out = params.out_channels();
    let out_shape = Shape::new(s.n, c_out, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let (rows, n_cols) = (g.rows(), g.cols());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_cols]
    };
    for n in 0..s.n {
        let dst = out.sample_mut(n);
        for (o, plane) in dst.chunks_exact_mut(n_cols).enumerate() {
            plane.fill(params.bias[o]);
        }
        let src: &[T] = if g.is_pointwise() {
            input.sample(n)
        } else {
            g.im2col(input.sample(n), &mut cols);
            &cols
        };
        T::gemm(
            c_out,
            rows,
            n_cols,
            T::one(),
            params.weight.data(),
            rows,
            1,
            src,
            n_cols,
            1,
            T::one(),
            dst,
            n_cols,
            1,
        );
    }
    Ok(out)
}

/// Reverse pass of [`conv2d_dilated`]. Accumulates into `grad_weight` and
/// `grad_bias` and returns the gradient with respect to `input`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut ConvParams<T>,
    dilation: usize,
    padding: usize,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = Geometry::new(s, params, dilation, padding, "conv2d_backward")?;
    let c_out = params.out_channels();
    let expected = Shape::new(s.n, c_out, g.out_h, g.out_w);
    if grad_output.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected,
            got: grad_output.shape(),
        });
    }
    let (rows, n_cols) = (g.rows(), g.cols());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_cols]
    };
    for n in 0..s.n {
        let go = grad_output.sample(n);
        for (o, plane) in go.chunks_exact(n_cols).enumerate() {
            params.grad_bias[o] = params.grad_bias[o] + plane.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            input.sample(n)
        } else {
            g.im2col(input.sample(n), &mut cols);
            &cols
        };
        // dW (c_out x rows) += dY (c_out x P) * cols^T (P x rows)
        T::gemm(
            c_out,
            n_cols,
            rows,
            T::one(),
            go,
            n_cols,
            1,
            src,
            1,
            n_cols,
            T::one(),
            params.grad_weight.data_mut(),
            rows,
            1,
        );
    }

    let span = dilation * (g.k - 1);
    if padding <= span {
        // The adjoint of a stride-1 convolution is a convolution of dY with
        // the flipped, channel-transposed kernel and padding span - padding.
        let k = g.k;
        let mut flipped = ConvParams::zeros(s.c, c_out, k);
        for o in 0..c_out {
            for c in 0..s.c {
                for i in 0..k {
                    for j in 0..k {
                        *flipped.weight.at_mut(c, o, k - 1 - i, k - 1 - j) = params.weight.at(o, c, i, j);
                    }
                }
            }
        }
        return conv2d_dilated(grad_output, &flipped, dilation, span - padding);
    }

    let mut grad_input = Tensor::zeros(s);
    for n in 0..s.n {
        // dcols (rows x P) = W^T (rows x c_out) * dY (c_out x P)
        T::gemm(
            rows,
            c_out,
            n_cols,
            T::one(),
            params.weight.data(),
            1,
            rows,
            grad_output.sample(n),
            n_cols,
            1,
            T::zero(),
            &mut cols,
            n_cols,
            1,
        );
        g.col2im_add(&cols, grad_input.sample_mut(n));
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let mut p = ConvParams::zeros(1, 1, 3);
        *p.weight.at_mut(0, 0, 1, 1) = 1.0;
        let y = conv2d_dilated(&x, &p, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_ones_center_and_corner() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 5, 5), 1.0);
        let mut p = ConvParams::zeros(1, 1, 3);
        p.weight.fill(1.0);
        let y = conv2d_dilated(&x, &p, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 4, 4), 4.0);
        // edge midpoint: 6 taps inside
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::<f32>::zeros(1, 3, 3);
        assert!(matches!(conv2d_dilated(&x, &p, 1, 1), Err(Error::ChannelMismatch { .. })));
        let p = ConvParams::<f32>::zeros(1, 2, 3);
        assert!(matches!(conv2d_dilated(&x, &p, 3, 0), Err(Error::EmptyOutput { .. })));
    }

    #[test]
    fn zero_grad_output_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ConvParams::<f64>::he_normal(2, 2, 3, &mut rng);
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, c, y, x| (c + y * x) as f64 * 0.1);
        let go = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let gi = conv2d_backward(&x, &mut p, 2, 2, &go).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(p.grad_weight.data().iter().all(|&v| v == 0.0));
        assert!(p.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let mut p = ConvParams::<f64>::zeros(1, 1, 1);
        p.weight.data_mut()[0] = 0.7;
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 2.5);
        let go = Tensor::full(Shape::new(1, 1, 1, 1), -1.5);
        let gi = conv2d_backward(&x, &mut p, 1, 0, &go).unwrap();
        assert_eq!(gi.data()[0], 0.7 * -1.5);
        assert_eq!(p.grad_weight.data()[0], 2.5 * -1.5);
        assert_eq!(p.grad_bias[0], -1.5);
    }

    #[test]
    fn backward_rejects_bad_grad_shape() {
        let mut p = ConvParams::<f64>::zeros(2, 1, 3);
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let go = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(conv2d_backward(&x, &mut p, 1, 1, &go).is_err());
    }

    #[test]
    fn he_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ConvParams::<f64>::he_normal(64, 16, 3, &mut rng);
        let n = p.weight.len() as f64;
        let mean = p.weight.sum() / n;
        let var = p.weight.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
        assert!((var - 2.0 / 144.0).abs() / (2.0 / 144.0) < 0.1);
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }
}
