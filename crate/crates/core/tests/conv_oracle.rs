use derain_core::{conv2d_backward, conv2d_dilated, ConvParams, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution with zero padding.
fn direct(input: &Tensor<f64>, p: &ConvParams<f64>, dilation: usize, padding: usize) -> Tensor<f64> {
    let s = input.shape();
    let k = p.kernel();
    let span = dilation * (k - 1);
    let oh = s.h + 2 * padding - span;
    let ow = s.w + 2 * padding - span;
    let mut out = Tensor::zeros(Shape::new(s.n, p.out_channels(), oh, ow));
    for n in 0..s.n {
        for o in 0..p.out_channels() {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = p.bias[o];
                    for c in 0..s.c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y + i * dilation) as isize - padding as isize;
                                let ix = (x + j * dilation) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += p.weight.at(o, c, i, j) * input.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(n, o, y, x) = acc;
                }
            }
        }
    }
    out
}

fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn random_params(out: usize, inp: usize, k: usize, rng: &mut impl Rng) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(out, inp, k);
    p.weight = random_tensor(p.weight.shape(), rng);
    p.bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    p
}

#[test]
fn matches_direct_convolution_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    while cases < 200 {
        let (n, cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = [1, 3][rng.random_range(0..2)];
        let d = rng.random_range(1..=3);
        let pad = rng.random_range(0..=d);
        if h + 2 * pad <= d * (k - 1) || w + 2 * pad <= d * (k - 1) {
            continue;
        }
        let x = random_tensor(Shape::new(n, cin, h, w), &mut rng);
        let p = random_params(cout, cin, k, &mut rng);
        let got = conv2d_dilated(&x, &p, d, pad).unwrap();
        let want = direct(&x, &p, d, pad);
        assert_eq!(got.shape(), want.shape());
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-6, "case {cases}: k={k} d={d} pad={pad} {:?} err {err}", x.shape());
        cases += 1;
    }
}

/// Finite-difference check of every input, weight and bias gradient for
/// `L = sum(g * conv(x))` with a fixed random `g`.
fn check_backward(shape: Shape, cout: usize, k: usize, dilation: usize, padding: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(shape, &mut rng);
    let mut p = random_params(cout, shape.c, k, &mut rng);
    let out_shape = conv2d_dilated(&x, &p, dilation, padding).unwrap().shape();
    let g = random_tensor(out_shape, &mut rng);
    let loss = |x: &Tensor<f64>, p: &ConvParams<f64>| -> f64 {
        let y = conv2d_dilated(x, p, dilation, padding).unwrap();
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let gx = conv2d_backward(&x, &mut p, dilation, padding, &g).unwrap();
    let eps = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += eps;
        xm.data_mut()[i] -= eps;
        let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * eps);
        assert!(rel(gx.data()[i], num) < 1e-4, "input {i}: {} vs {num}", gx.data()[i]);
    }
    for i in 0..p.weight.len() {
        let (mut pp, mut pm) = (p.clone(), p.clone());
        pp.weight.data_mut()[i] += eps;
        pm.weight.data_mut()[i] -= eps;
        let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * eps);
        assert!(rel(p.grad_weight.data()[i], num) < 1e-4, "weight {i}");
    }
    for o in 0..cout {
        let (mut pp, mut pm) = (p.clone(), p.clone());
        pp.bias[o] += eps;
        pm.bias[o] -= eps;
        let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * eps);
        assert!(rel(p.grad_bias[o], num) < 1e-4, "bias {o}");
    }
}

#[test]
fn backward_matches_finite_differences_dilation_two() {
    check_backward(Shape::new(1, 2, 4, 4), 2, 3, 2, 2, 11);
}

#[test]
fn backward_matches_finite_differences_assorted() {
    check_backward(Shape::new(2, 3, 5, 7), 2, 3, 1, 1, 12);
    check_backward(Shape::new(1, 2, 8, 6), 3, 3, 3, 1, 13);
    check_backward(Shape::new(2, 4, 3, 3), 2, 1, 1, 0, 14);
}

#[test]
fn backward_is_the_adjoint() {
    // <conv_nobias(x), g> == <x, conv_backward(g)>
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_tensor(Shape::new(2, 3, 7, 6), &mut rng);
    let mut p = random_params(4, 3, 3, &mut rng);
    p.bias.iter_mut().for_each(|b| *b = 0.0);
    let y = conv2d_dilated(&x, &p, 2, 2).unwrap();
    let g = random_tensor(y.shape(), &mut rng);
    let gx = conv2d_backward(&x, &mut p, 2, 2, &g).unwrap();
    let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn three_by_three_preserves_resolution(h in 1usize..12, w in 1usize..12, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(1, 2, h, w), &mut rng);
        let p = random_params(3, 2, 3, &mut rng);
        let y = conv2d_dilated(&x, &p, d, d).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(1, 3, h, w));
    }

    #[test]
    fn linear_without_bias(a in -3.0f64..3.0, b in -3.0f64..3.0, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, 3, 6, 5);
        let (x, y) = (random_tensor(s, &mut rng), random_tensor(s, &mut rng));
        let mut p = random_params(2, 3, 3, &mut rng);
        p.bias = vec![0.0; 2];
        let mix = Tensor::from_fn(s, |n, c, i, j| a * x.at(n, c, i, j) + b * y.at(n, c, i, j));
        let lhs = conv2d_dilated(&mix, &p, d, d).unwrap();
        let (cx, cy) = (conv2d_dilated(&x, &p, d, d).unwrap(), conv2d_dilated(&y, &p, d, d).unwrap());
        let rhs = Tensor::from_fn(lhs.shape(), |n, c, i, j| a * cx.at(n, c, i, j) + b * cy.at(n, c, i, j));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }
}
