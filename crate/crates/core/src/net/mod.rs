//! The tree-structured fusion deraining network.
//!
//! Layout: a 3x3 feature extraction layer, `num_blocks` dilated blocks and a
//! 1x1 reconstruction layer predicting the rain residual `R`; the derained
//! image is `Y = X - R`. Each block applies one shared 3x3 kernel at
//! dilations `1..=max_dilation`, merges those maps (tree fusion or plain
//! summation) and adds a skip connection. Block outputs are optionally merged
//! by a second fusion tree before reconstruction.

mod config;
mod fusion;
mod network;
mod stats;

pub use config::{FusionMode, NetworkConfig};
pub use fusion::{fuse, tree_reduce};
pub use network::{BlockParams, ForwardPass, FusionTap, Inference, Network, TapScope};
pub use stats::{feature_stats, FeatureStats, RedundancyStats};

