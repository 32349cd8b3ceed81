use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A rainy image and its clean ground truth, each `(1, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub rainy: Tensor<T>,
    pub clean: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(rainy: Tensor<T>, clean: Tensor<T>) -> Result<Self> {
        if rainy.shape() != clean.shape() || rainy.shape().n != 1 {
            return Err(Error::ShapeMismatch {
                op: "image pair",
                expected: clean.shape(),
                got: rainy.shape(),
            });
        }
        Ok(Self { rainy, clean })
    }
}

/// A stack of aligned crops. `origins[i]` is `(pair, top, left)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub rainy: Tensor<T>,
    pub clean: Tensor<T>,
    pub origins: Vec<(usize, usize, usize)>,
}

/// Draws `batch_size` pairs uniformly with replacement and crops each at a
/// uniform `patch x patch` window, the same window for both images.
pub fn sample_patches<T: Scalar, R: Rng + ?Sized>(
    pairs: &[ImagePair<T>],
    batch_size: usize,
    patch: usize,
    rng: &mut R,
) -> Result<Batch<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(p) = pairs.iter().find(|p| p.clean.shape().h < patch || p.clean.shape().w < patch) {
        let s = p.clean.shape();
        return Err(Error::ImageTooSmall { h: s.h, w: s.w, min: patch });
    }
    let mut rainy = Vec::with_capacity(batch_size);
    let mut clean = Vec::with_capacity(batch_size);
    let mut origins = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..pairs.len());
        let s = pairs[i].clean.shape();
        let top = rng.random_range(0..=s.h - patch);
        let left = rng.random_range(0..=s.w - patch);
        rainy.push(pairs[i].rainy.crop(0, top, left, patch, patch)?);
        clean.push(pairs[i].clean.crop(0, top, left, patch, patch)?);
        origins.push((i, top, left));
    }
    Ok(Batch {
        rainy: Tensor::stack(&rainy)?,
        clean: Tensor::stack(&clean)?,
        origins,
    })
}
