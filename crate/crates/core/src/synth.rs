//! Synthetic rain streaks and synthetic clean scenes for small training and
//! test sets.
//!
//! Streaks are purely additive and achromatic: sparse random seed pixels are
//! stamped with an oriented line of fixed length, scaled by the intensity,
//! added to every channel, and the result is clamped to `[0, 1]`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::ImagePair;

/// Per-pixel seed probability at `density = 1`.
pub const SEED_RATE_AT_FULL_DENSITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainParams {
    /// Streak angle from vertical, in `[-45, 45]`; positive leans right going down.
    pub angle_deg: f64,
    pub streak_length_px: usize,
    /// Scales the seed probability, in `[0, 1]`.
    pub density: f64,
    /// Added brightness per covered pixel, in `[0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            angle_deg: 10.0,
            streak_length_px: 9,
            density: 0.8,
            intensity: 0.5,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("rain: {m}")));
        if !(-45.0..=45.0).contains(&self.angle_deg) {
            return bad("angle must be within [-45, 45] degrees");
        }
        if self.streak_length_px == 0 {
            return bad("streak length must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.density) {
            return bad("density must be within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return bad("intensity must be within [0, 1]");
        }
        Ok(())
    }
}

/// Pixel offsets `(dy, dx)` of one streak starting at its top end. The line
/// is rasterized one pixel per row, its Euclidean length is
/// `streak_length_px - 1` between end pixel centres (up to rounding).
pub fn streak_offsets(length: usize, angle_deg: f64) -> Vec<(usize, isize)> {
    let theta = angle_deg.to_radians();
    let rows = (((length.max(1) - 1) as f64) * theta.cos()).round() as usize + 1;
    (0..rows)
        .map(|dy| (dy, (dy as f64 * theta.tan()).round() as isize))
        .collect()
}

/// Draws the seed mask, row-major over `h x w`.
pub fn streak_seeds(h: usize, w: usize, p: &RainParams) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let rate = p.density * SEED_RATE_AT_FULL_DENSITY;
    // Always consume one draw per pixel so masks nest as density grows.
    (0..h * w).map(|_| rng.random::<f64>() < rate).collect()
}

/// The additive rain layer before clamping, row-major over `h x w`.
pub fn rain_layer(h: usize, w: usize, p: &RainParams) -> Vec<f64> {
    let offsets = streak_offsets(p.streak_length_px, p.angle_deg);
    let mut layer = vec![0.0; h * w];
    for (i, _) in streak_seeds(h, w, p).iter().enumerate().filter(|(_, &s)| s) {
        let (y0, x0) = (i / w, (i % w) as isize);
        for &(dy, dx) in &offsets {
            let (y, x) = (y0 + dy, x0 + dx);
            if y < h && (0..w as isize).contains(&x) {
                layer[y * w + x as usize] += p.intensity;
            }
        }
    }
    layer
}

/// Adds rain to every sample of `clean` (values in `[0, 1]`). Each sample
/// gets its own layer, seeded from `p.seed + n`.
pub fn synth_rain<T: Scalar>(clean: &Tensor<T>, p: &RainParams) -> Result<Tensor<T>> {
    p.validate()?;
    let s = clean.shape();
    let mut rainy = clean.clone();
    for n in 0..s.n {
        let params = RainParams {
            seed: p.seed.wrapping_add(n as u64),
            ..*p
        };
        let layer = rain_layer(s.h, s.w, &params);
        for plane in rainy.sample_mut(n).chunks_exact_mut(s.plane()) {
            for (v, &r) in plane.iter_mut().zip(&layer) {
                let sum = v.to_f64_lossy() + r;
                *v = T::from_f64_lossy(sum.clamp(0.0, 1.0));
            }
        }
    }
    Ok(rainy)
}

/// A smooth synthetic RGB scene `(1, 3, h, w)` with values in `[0.05, 0.8]`:
/// a color gradient, low-frequency waves and a few flat rectangles.
pub fn synth_clean<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1ea);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.5));
    let slope: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..4)
        .map(|_| {
            let top = rng.random_range(0..h);
            let left = rng.random_range(0..w);
            let rh = rng.random_range(1..=h.div_ceil(3));
            let rw = rng.random_range(1..=w.div_ceil(3));
            (top, left, rh, rw, std::array::from_fn(|_| rng.random_range(-0.15..0.15)))
        })
        .collect();
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (fy, fx) = (y as f64 / h.max(1) as f64, x as f64 / w.max(1) as f64);
        let mut v = base[c] + slope[c].0 * fy + slope[c].1 * fx;
        for &(ky, kx, phase, amp) in &waves {
            v += amp * (ky * y as f64 + kx * x as f64 + phase + c as f64 * 0.5).sin();
        }
        for &(top, left, rh, rw, shift) in &rects {
            if (top..top + rh).contains(&y) && (left..left + rw).contains(&x) {
                v += shift[c];
            }
        }
        T::from_f64_lossy(v.clamp(0.05, 0.8))
    })
}

/// Provenance of one generated pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub clean_index: usize,
    /// Parameters with the seed actually used.
    pub params: RainParams,
}

/// One rainy image per `(clean, params)` combination, cleans in the outer
/// loop. Each pair draws a fresh streak seed from `rng`.
pub fn make_dataset<T: Scalar, R: RngCore + ?Sized>(
    cleans: &[Tensor<T>],
    params_list: &[RainParams],
    rng: &mut R,
) -> Result<Vec<(ImagePair<T>, PairRecord)>> {
    if cleans.is_empty() || params_list.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(cleans.len() * params_list.len());
    for (ci, clean) in cleans.iter().enumerate() {
        for p in params_list {
            let params = RainParams {
                seed: rng.next_u64(),
                ..*p
            };
            let rainy = synth_rain(clean, &params)?;
            out.push((
                ImagePair::new(rainy, clean.clone())?,
                PairRecord {
                    clean_index: ci,
                    params,
                },
            ));
        }
    }
    Ok(out)
}
