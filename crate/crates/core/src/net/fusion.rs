use crate::conv::{conv2d_backward, conv2d_dilated, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_fuse_params<T: Scalar>(z1: &Tensor<T>, z2: &Tensor<T>, params: &ConvParams<T>) -> Result<()> {
    if z1.shape() != z2.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            expected: z1.shape(),
            got: z2.shape(),
        });
    }
    let c = z1.shape().c;
    if params.kernel() != 1 || params.in_channels() != 2 * c || params.out_channels() != c {
        return Err(Error::ChannelMismatch {
            op: "fuse",
            expected: 2 * c,
            got: params.in_channels(),
        });
    }
    Ok(())
}

/// `relu(conv1x1(concat(z1, z2)))`: merges two same-shape features into one
/// of the same shape.
pub fn fuse<T: Scalar>(z1: &Tensor<T>, z2: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    check_fuse_params(z1, z2, params)?;
    let cat = Tensor::concat_channels(z1, z2)?;
    Ok(conv2d_dilated(&cat, params, 1, 0)?.relu())
}

/// Hierarchical pairwise reduction of `features` into one tensor.
///
/// Each level fuses adjacent pairs `(1,2), (3,4), ...` left to right; an odd
/// trailing feature is carried up unfused. `n` features consume exactly
/// `n - 1` parameter sets, in level order.
pub fn tree_reduce<T: Scalar>(features: &[Tensor<T>], fuse_params: &[ConvParams<T>]) -> Result<Tensor<T>> {
    Ok(TreeTrace::build(features.to_vec(), fuse_params)?.into_root())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FuseNode {
    pub left: usize,
    pub right: usize,
    pub out: usize,
    pub param: usize,
}

/// A reduced tree with every intermediate kept for the backward pass. Slots
/// `0..leaves` hold the inputs; each fusion appends one slot.
#[derive(Debug, Clone)]
pub(crate) struct TreeTrace<T> {
    slots: Vec<Tensor<T>>,
    nodes: Vec<FuseNode>,
    leaves: usize,
    root: usize,
}

impl<T: Scalar> TreeTrace<T> {
    pub fn build(features: Vec<Tensor<T>>, params: &[ConvParams<T>]) -> Result<Self> {
        let n = features.len();
        if n == 0 || params.len() != n - 1 {
            return Err(Error::ParamCountMismatch {
                op: "tree_reduce",
                expected: n.saturating_sub(1),
                got: params.len(),
            });
        }
        let shape = features[0].shape();
        if let Some(bad) = features.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "tree_reduce",
                expected: shape,
                got: bad.shape(),
            });
        }
        let mut trace = Self {
            slots: features,
            nodes: Vec::with_capacity(n - 1),
            leaves: n,
            root: 0,
        };
        let mut level: Vec<usize> = (0..n).collect();
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            for pair in level.chunks(2) {
                match *pair {
                    [left, right] => {
                        let param = trace.nodes.len();
                        let z = fuse(&trace.slots[left], &trace.slots[right], &params[param])?;
                        let out = trace.slots.len();
                        trace.slots.push(z);
                        trace.nodes.push(FuseNode { left, right, out, param });
                        next.push(out);
                    }
                    [carried] => next.push(carried),
                    _ => unreachable!(),
                }
            }
            level = next;
        }
        trace.root = level[0];
        Ok(trace)
    }

    pub fn root(&self) -> &Tensor<T> {
        &self.slots[self.root]
    }

    pub fn into_root(mut self) -> Tensor<T> {
        self.slots.swap_remove(self.root)
    }

    /// `(node, z1, z2, fused)` for every fusion, in evaluation order.
    pub fn fusions(&self) -> impl Iterator<Item = (usize, &Tensor<T>, &Tensor<T>, &Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, &self.slots[n.left], &self.slots[n.right], &self.slots[n.out]))
    }

    /// Backpropagates `grad_root` through every fusion, accumulating parameter
    /// gradients. Returns one gradient per leaf.
    pub fn backward(&self, params: &mut [ConvParams<T>], grad_root: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.slots.len()];
        grads[self.root] = Some(grad_root);
        for node in self.nodes.iter().rev() {
            let Some(mut g) = grads[node.out].take() else {
                continue;
            };
            Tensor::mask_by_positive(&mut g, &self.slots[node.out]);
            let (z1, z2) = (&self.slots[node.left], &self.slots[node.right]);
            let cat = Tensor::concat_channels(z1, z2)?;
            let g_cat = conv2d_backward(&cat, &mut params[node.param], 1, 0, &g)?;
            let (g1, g2) = g_cat.split_channels(z1.shape().c)?;
            for (slot, gi) in [(node.left, g1), (node.right, g2)] {
                match &mut grads[slot] {
                    Some(acc) => acc.add_assign(&gi)?,
                    empty => *empty = Some(gi),
                }
            }
        }
        Ok(grads
            .into_iter()
            .take(self.leaves)
            .zip(&self.slots)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(s.shape())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// 1x1 kernel computing `a*z1 + b*z2` channelwise.
    fn mixing(c: usize, a: f64, b: f64) -> ConvParams<f64> {
        let mut p = ConvParams::zeros(c, 2 * c, 1);
        for o in 0..c {
            *p.weight.at_mut(o, o, 0, 0) = a;
            *p.weight.at_mut(o, o + c, 0, 0) = b;
        }
        p
    }

    #[test]
    fn zero_params_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(2, 3, 4, 5);
        let z = fuse(&random(s, &mut rng), &random(s, &mut rng), &ConvParams::zeros(3, 6, 1)).unwrap();
        assert_eq!(z, Tensor::zeros(s));
    }

    #[test]
    fn projection_selects_first_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(1, 4, 3, 3);
        let z1 = random(s, &mut rng).map(f64::abs);
        let z = fuse(&z1, &random(s, &mut rng), &mixing(4, 1.0, 0.0)).unwrap();
        assert_eq!(z, z1);
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 4, 3, 3));
        let b = Tensor::<f64>::zeros(Shape::new(1, 4, 3, 4));
        assert!(fuse(&a, &b, &ConvParams::zeros(4, 8, 1)).is_err());
        assert!(fuse(&a, &a, &ConvParams::zeros(4, 4, 1)).is_err());
        assert!(fuse(&a, &a, &ConvParams::zeros(4, 8, 3)).is_err());
    }

    #[test]
    fn single_leaf_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(Shape::new(1, 2, 3, 3), &mut rng);
        assert_eq!(tree_reduce(std::slice::from_ref(&f), &[]).unwrap(), f);
    }

    #[test]
    fn param_count_must_be_n_minus_one() {
        let f = vec![Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2)); 4];
        let p = vec![ConvParams::zeros(2, 4, 1); 2];
        assert!(matches!(tree_reduce(&f, &p), Err(Error::ParamCountMismatch { expected: 3, got: 2, .. })));
        assert!(tree_reduce::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn four_leaves_form_two_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape::new(1, 2, 3, 3);
        let f: Vec<_> = (0..4).map(|_| random(s, &mut rng)).collect();
        let p: Vec<_> = (0..3).map(|_| ConvParams::he_normal(2, 4, 1, &mut rng)).collect();
        let expected = fuse(&fuse(&f[0], &f[1], &p[0]).unwrap(), &fuse(&f[2], &f[3], &p[1]).unwrap(), &p[2]).unwrap();
        assert_eq!(tree_reduce(&f, &p).unwrap(), expected);
        let trace = TreeTrace::build(f, &p).unwrap();
        assert_eq!(trace.nodes.len(), 3);
    }

    #[test]
    fn odd_leaf_is_carried() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(1, 2, 3, 3);
        let f: Vec<_> = (0..3).map(|_| random(s, &mut rng)).collect();
        let p: Vec<_> = (0..2).map(|_| ConvParams::he_normal(2, 4, 1, &mut rng)).collect();
        let expected = fuse(&fuse(&f[0], &f[1], &p[0]).unwrap(), &f[2], &p[1]).unwrap();
        assert_eq!(tree_reduce(&f, &p).unwrap(), expected);
    }

    #[test]
    fn eight_leaves_use_seven_fusions_in_three_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Shape::new(1, 1, 2, 2);
        let f: Vec<_> = (0..8).map(|_| random(s, &mut rng)).collect();
        let p: Vec<_> = (0..7).map(|_| ConvParams::he_normal(1, 2, 1, &mut rng)).collect();
        let l1: Vec<_> = (0..4).map(|i| fuse(&f[2 * i], &f[2 * i + 1], &p[i]).unwrap()).collect();
        let l2a = fuse(&l1[0], &l1[1], &p[4]).unwrap();
        let l2b = fuse(&l1[2], &l1[3], &p[5]).unwrap();
        let root = fuse(&l2a, &l2b, &p[6]).unwrap();
        assert_eq!(tree_reduce(&f, &p).unwrap(), root);
    }

    #[test]
    fn summing_kernels_reduce_to_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Shape::new(2, 3, 4, 4);
        for n in 1..=7 {
            let f: Vec<_> = (0..n).map(|_| random(s, &mut rng).map(f64::abs)).collect();
            let p = vec![mixing(3, 1.0, 1.0); n - 1];
            let mut sum = Tensor::zeros(s);
            for x in &f {
                sum.add_assign(x).unwrap();
            }
            let got = tree_reduce(&f, &p).unwrap();
            assert!(got.max_abs_diff(&sum) < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn tree_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape::new(1, 2, 3, 3);
        let f: Vec<_> = (0..5).map(|_| random(s, &mut rng)).collect();
        let mut p: Vec<_> = (0..4).map(|_| ConvParams::he_normal(2, 4, 1, &mut rng)).collect();
        let w = random(s, &mut rng);
        let loss = |f: &[Tensor<f64>], p: &[ConvParams<f64>]| -> f64 {
            let r = tree_reduce(f, p).unwrap();
            r.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let trace = TreeTrace::build(f.clone(), &p).unwrap();
        let leaf_grads = trace.backward(&mut p, w.clone()).unwrap();
        let eps = 1e-6;
        for (li, g) in leaf_grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut fp = f.clone();
                fp[li].data_mut()[i] += eps;
                let mut fm = f.clone();
                fm[li].data_mut()[i] -= eps;
                let num = (loss(&fp, &p) - loss(&fm, &p)) / (2.0 * eps);
                assert!((num - g.data()[i]).abs() < 1e-6, "leaf {li} elem {i}: {num} vs {}", g.data()[i]);
            }
        }
        for pi in 0..p.len() {
            for i in 0..p[pi].weight.len() {
                let mut pp = p.clone();
                pp[pi].weight.data_mut()[i] += eps;
                let mut pm = p.clone();
                pm[pi].weight.data_mut()[i] -= eps;
                let num = (loss(&f, &pp) - loss(&f, &pm)) / (2.0 * eps);
                let a = p[pi].grad_weight.data()[i];
                assert!((num - a).abs() < 1e-6, "param {pi} w{i}: {num} vs {a}");
            }
        }
    }
}
