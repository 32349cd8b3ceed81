use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::fusion::TreeTrace;
use super::stats::{feature_stats, RedundancyStats};
use crate::conv::{conv2d_backward, conv2d_dilated, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One dilated block: a single 3x3 kernel shared by every dilation, plus the
/// 1x1 layers of its fusion tree (empty when the within-block tree is off).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub shared_conv: ConvParams<T>,
    pub within_fuse: Vec<ConvParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    /// 3x3, input channels to feature channels.
    pub extract: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// 1x1 layers of the cross-block tree (empty when it is off).
    pub cross_fuse: Vec<ConvParams<T>>,
    /// 1x1, feature channels to input channels.
    pub reconstruct: ConvParams<T>,
}

/// Where a fusion node sits. Blocks are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapScope {
    Within { block: usize },
    Across,
}

/// Redundancy statistics for one fusion node.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTap {
    pub scope: TapScope,
    /// Fusion index inside its tree, in evaluation order.
    pub node: usize,
    pub stats: RedundancyStats,
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// Derained image, clamped to `[0, 1]`.
    pub y: Tensor<T>,
    /// Predicted rain residual.
    pub r: Tensor<T>,
    pub taps: Vec<FusionTap>,
}

#[derive(Debug, Clone)]
enum Merge<T> {
    Tree(TreeTrace<T>),
    Sum,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    merge: Merge<T>,
    output: Tensor<T>,
}

/// Everything a training forward pass keeps for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Unclamped `X - R`.
    pub y: Tensor<T>,
    pub r: Tensor<T>,
    x: Tensor<T>,
    features: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    cross: Option<TreeTrace<T>>,
}

impl<T: Scalar> Network<T> {
    /// Allocates and initializes every layer, deterministically from
    /// `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let extract = ConvParams::he_normal(c, config.input_channels, 3, &mut rng);
        let within = if config.fusion_mode.within_tree() {
            config.max_dilation - 1
        } else {
            0
        };
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                shared_conv: ConvParams::he_normal(c, c, 3, &mut rng),
                within_fuse: (0..within)
                    .map(|_| ConvParams::he_normal(c, 2 * c, 1, &mut rng))
                    .collect(),
            })
            .collect();
        let across = if config.fusion_mode.across_tree() {
            config.num_blocks - 1
        } else {
            0
        };
        let cross_fuse = (0..across)
            .map(|_| ConvParams::he_normal(c, 2 * c, 1, &mut rng))
            .collect();
        let reconstruct = ConvParams::he_normal(config.input_channels, c, 1, &mut rng);
        Ok(Self {
            config,
            extract,
            blocks,
            cross_fuse,
            reconstruct,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.layers().iter().map(|(_, p)| p.num_params()).sum()
    }

    /// Every layer with its canonical name, in a fixed order.
    pub fn layers(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out = vec![("extract".to_string(), &self.extract)];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.conv", b + 1), &block.shared_conv));
            for (j, f) in block.within_fuse.iter().enumerate() {
                out.push((format!("block{}.fuse{}", b + 1, j + 1), f));
            }
        }
        for (j, f) in self.cross_fuse.iter().enumerate() {
            out.push((format!("cross.fuse{}", j + 1), f));
        }
        out.push(("reconstruct".to_string(), &self.reconstruct));
        out
    }

    /// Same order as [`Network::layers`].
    pub fn layers_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out = vec![&mut self.extract];
        for block in &mut self.blocks {
            out.push(&mut block.shared_conv);
            out.extend(block.within_fuse.iter_mut());
        }
        out.extend(self.cross_fuse.iter_mut());
        out.push(&mut self.reconstruct);
        out
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().into_iter().for_each(ConvParams::zero_grad);
    }

    /// All weights and biases flattened in layer order (weight then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.count_parameters());
        for (_, p) in self.layers() {
            v.extend(p.weight.data().iter().map(|w| w.to_f64_lossy()));
            v.extend(p.bias.iter().map(|b| b.to_f64_lossy()));
        }
        v
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.count_parameters());
        for (_, p) in self.layers() {
            v.extend(p.grad_weight.data().iter().map(|w| w.to_f64_lossy()));
            v.extend(p.grad_bias.iter().map(|b| b.to_f64_lossy()));
        }
        v
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count_parameters() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.count_parameters(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for p in self.layers_mut() {
            for (dst, src) in p.weight.data_mut().iter_mut().chain(p.bias.iter_mut()).zip(&mut it) {
                *dst = T::from_f64_lossy(*src);
            }
        }
        Ok(())
    }

    /// Converts every parameter (gradients are reset).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |p: &ConvParams<T>| {
            let mut q = ConvParams::zeros(p.out_channels(), p.in_channels(), p.kernel());
            q.weight = p.weight.cast();
            q.bias = p.bias.iter().map(|b| U::from_f64_lossy(b.to_f64_lossy())).collect();
            q
        };
        Network {
            config: self.config,
            extract: conv(&self.extract),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    shared_conv: conv(&b.shared_conv),
                    within_fuse: b.within_fuse.iter().map(conv).collect(),
                })
                .collect(),
            cross_fuse: self.cross_fuse.iter().map(conv).collect(),
            reconstruct: conv(&self.reconstruct),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.config.input_channels {
            return Err(Error::ChannelMismatch {
                op: "forward",
                expected: self.config.input_channels,
                got: x.shape().c,
            });
        }
        Ok(())
    }

    fn block_forward(&self, input: &Tensor<T>, block: &BlockParams<T>) -> Result<BlockTrace<T>> {
        let dilated = (1..=self.config.max_dilation)
            .map(|d| conv2d_dilated(input, &block.shared_conv, d, d))
            .collect::<Result<Vec<_>>>()?;
        let (fused, merge) = if self.config.fusion_mode.within_tree() {
            let trace = TreeTrace::build(dilated, &block.within_fuse)?;
            (trace.root().add(input)?, Merge::Tree(trace))
        } else {
            let mut acc = input.clone();
            for f in &dilated {
                acc.add_assign(f)?;
            }
            (acc, Merge::Sum)
        };
        Ok(BlockTrace {
            merge,
            output: fused.relu(),
        })
    }

    fn run(&self, x: &Tensor<T>, mut on_block: impl FnMut(usize, BlockTrace<T>) -> Result<()>) -> Result<(Tensor<T>, Tensor<T>, Option<TreeTrace<T>>)> {
        self.check_input(x)?;
        let features = conv2d_dilated(x, &self.extract, 1, 1)?.relu();
        let mut prev = features.clone();
        let mut outputs = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let trace = self.block_forward(&prev, block)?;
            prev = trace.output.clone();
            if self.config.fusion_mode.across_tree() {
                outputs.push(prev.clone());
            }
            on_block(b, trace)?;
        }
        let (recon_in, cross) = if self.config.fusion_mode.across_tree() {
            let trace = TreeTrace::build(outputs, &self.cross_fuse)?;
            (trace.root().clone(), Some(trace))
        } else {
            (prev, None)
        };
        let r = conv2d_dilated(&recon_in, &self.reconstruct, 1, 0)?;
        Ok((features, r, cross))
    }

    /// Training forward pass: no clamping, all intermediates retained.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let (features, r, cross) = self.run(x, |_, t| {
            blocks.push(t);
            Ok(())
        })?;
        Ok(ForwardPass {
            y: x.sub(&r)?,
            r,
            x: x.clone(),
            features,
            blocks,
            cross,
        })
    }

    /// Inference: `Y = clamp(X - R, 0, 1)`. With `taps`, redundancy
    /// statistics are recorded for every fusion node.
    pub fn forward(&self, x: &Tensor<T>, taps: bool) -> Result<Inference<T>> {
        let mut recorded = Vec::new();
        let (_, r, cross) = self.run(x, |b, t| {
            if let (true, Merge::Tree(tree)) = (taps, &t.merge) {
                for (node, z1, z2, z) in tree.fusions() {
                    recorded.push(FusionTap {
                        scope: TapScope::Within { block: b + 1 },
                        node,
                        stats: feature_stats(z1, z2, z)?,
                    });
                }
            }
            Ok(())
        })?;
        if let (true, Some(tree)) = (taps, &cross) {
            for (node, z1, z2, z) in tree.fusions() {
                recorded.push(FusionTap {
                    scope: TapScope::Across,
                    node,
                    stats: feature_stats(z1, z2, z)?,
                });
            }
        }
        let zero = T::zero();
        let one = T::one();
        let y = x.sub(&r)?.map(|v| v.max(zero).min(one));
        Ok(Inference { y, r, taps: recorded })
    }

    /// Accumulates parameter gradients given `dL/dY` for a pass produced by
    /// [`Network::forward_train`] on this network.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grad_y: &Tensor<T>) -> Result<()> {
        if grad_y.shape() != pass.y.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: pass.y.shape(),
                got: grad_y.shape(),
            });
        }
        let grad_r = grad_y.map(|g| -g);
        let nb = self.blocks.len();
        let last = pass.blocks.last().map_or(&pass.features, |b| &b.output);
        let recon_in = match &pass.cross {
            Some(tree) => tree.root(),
            None => last,
        };
        let g_recon = conv2d_backward(recon_in, &mut self.reconstruct, 1, 0, &grad_r)?;

        // Gradient arriving at each block output.
        let mut g_out: Vec<Option<Tensor<T>>> = vec![None; nb];
        match &pass.cross {
            Some(tree) => {
                for (b, g) in tree.backward(&mut self.cross_fuse, g_recon)?.into_iter().enumerate() {
                    g_out[b] = Some(g);
                }
            }
            None => g_out[nb - 1] = Some(g_recon),
        }

        let max_dilation = self.config.max_dilation;
        let mut g_features = None;
        for b in (0..nb).rev() {
            let trace = &pass.blocks[b];
            let input = if b == 0 {
                &pass.features
            } else {
                &pass.blocks[b - 1].output
            };
            let mut g = g_out[b].take().unwrap_or_else(|| Tensor::zeros(trace.output.shape()));
            Tensor::mask_by_positive(&mut g, &trace.output);
            let block = &mut self.blocks[b];
            let g_dilated = match &trace.merge {
                Merge::Tree(tree) => tree.backward(&mut block.within_fuse, g.clone())?,
                Merge::Sum => vec![g.clone(); max_dilation],
            };
            // Skip connection.
            let mut g_in = g;
            for (d, gd) in (1..=max_dilation).zip(&g_dilated) {
                g_in.add_assign(&conv2d_backward(input, &mut block.shared_conv, d, d, gd)?)?;
            }
            if b == 0 {
                g_features = Some(g_in);
            } else {
                match &mut g_out[b - 1] {
                    Some(acc) => acc.add_assign(&g_in)?,
                    slot => *slot = Some(g_in),
                }
            }
        }

        let mut g_features = g_features.expect("at least one block");
        Tensor::mask_by_positive(&mut g_features, &pass.features);
        conv2d_backward(&pass.x, &mut self.extract, 1, 1, &g_features)?;
        Ok(())
    }
}
