use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel mean and (population) standard deviation over batch and space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        let mut mean = Vec::with_capacity(s.c);
        let mut std = Vec::with_capacity(s.c);
        for c in 0..s.c {
            // Welford
            let (mut count, mut mu, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for n in 0..s.n {
                for &v in t.plane(n, c) {
                    let v = v.to_f64_lossy();
                    count += 1.0;
                    let delta = v - mu;
                    mu += delta / count;
                    m2 += delta * (v - mu);
                }
            }
            mean.push(mu);
            std.push((m2 / count).max(0.0).sqrt());
        }
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of two adjacent features, their difference and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyStats {
    pub z1: FeatureStats,
    pub z2: FeatureStats,
    pub diff: FeatureStats,
    pub fused: FeatureStats,
}

impl RedundancyStats {
    pub fn named(&self) -> [(&'static str, &FeatureStats); 4] {
        [
            ("z1", &self.z1),
            ("z2", &self.z2),
            ("diff", &self.diff),
            ("fused", &self.fused),
        ]
    }
}

pub fn feature_stats<T: Scalar>(z1: &Tensor<T>, z2: &Tensor<T>, fused: &Tensor<T>) -> Result<RedundancyStats> {
    for other in [z2, fused] {
        if other.shape() != z1.shape() {
            return Err(Error::ShapeMismatch {
                op: "feature_stats",
                expected: z1.shape(),
                got: other.shape(),
            });
        }
    }
    Ok(RedundancyStats {
        z1: FeatureStats::of(z1),
        z2: FeatureStats::of(z2),
        diff: FeatureStats::of(&z1.sub(z2)?),
        fused: FeatureStats::of(fused),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_pass(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| t.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn identical_inputs_have_zero_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::from_fn(Shape::new(2, 3, 4, 4), |_, _, _, _| rng.random::<f64>());
        let s = feature_stats(&z, &z, &z).unwrap();
        assert!(s.diff.mean.iter().chain(&s.diff.std).all(|&v| v == 0.0));
        assert_eq!(s.diff.channels(), 3);
    }

    #[test]
    fn constants() {
        let s = Shape::new(1, 2, 3, 3);
        let a = Tensor::<f64>::full(s, 0.25);
        let b = Tensor::<f64>::full(s, -1.5);
        let st = feature_stats(&a, &b, &a).unwrap();
        assert_eq!(st.z1.mean, vec![0.25; 2]);
        assert_eq!(st.z2.mean, vec![-1.5; 2]);
        assert!(st.z1.std.iter().chain(&st.z2.std).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(3, 4, 5, 6);
        let mut r = || Tensor::from_fn(s, |_, c, _, _| rng.random_range(-2.0..2.0) + c as f64);
        let (a, b, f) = (r(), r(), r());
        let st = feature_stats(&a, &b, &f).unwrap();
        let d = a.sub(&b).unwrap();
        for c in 0..4 {
            for (t, fs) in [(&a, &st.z1), (&b, &st.z2), (&d, &st.diff), (&f, &st.fused)] {
                let (m, sd) = two_pass(t, c);
                assert!((fs.mean[c] - m).abs() < 1e-6);
                assert!((fs.std[c] - sd).abs() < 1e-6);
                assert!(fs.std[c] >= 0.0);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 3));
        assert!(feature_stats(&a, &b, &a).is_err());
    }
}
