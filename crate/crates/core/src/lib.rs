//! Single image deraining with a deep tree-structured fusion network.
//!
//! Everything is built from scratch on a small NCHW tensor type: dilated
//! convolution with hand-written backward passes, the fusion network itself,
//! an MSE + SSIM training loss, Adam, a synthetic rain generator and a binary
//! checkpoint format. The crate performs no filesystem access; the `derain`
//! command line tool handles files.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;

pub use conv::{conv2d_backward, conv2d_dilated, ConvParams};
pub use error::{Error, Result};
pub use loss::{combined_loss, mse, psnr, ssim, LossConfig, SsimConfig};
pub use net::{
    feature_stats, fuse, tree_reduce, FeatureStats, FusionMode, FusionTap, Network,
    NetworkConfig, TapScope,
};
pub use tensor::{Scalar, Shape, Tensor};
pub use train::{lr_schedule, AdamState, TrainConfig};
