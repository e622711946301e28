use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::WindowedExample;

/// Gaussian-noise augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// z-score features and envelopes with training statistics first.
    pub standardize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_sigma: 1.0, standardize: true }
    }
}

/// Add independent `N(0, sigma^2)` draws to every element of `xs`.
pub fn add_gaussian_noise<F, R>(xs: &mut [F], sigma: f64, rng: &mut R)
where
    F: Float + FromPrimitive,
    R: Rng + ?Sized,
{
    if sigma == 0.0 {
        return;
    }
    for x in xs.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = *x + F::from_f64(sigma * z).expect("finite noise");
    }
}

/// Noisy copy of `example`. Features are perturbed first (row-major), then
/// `env_a`, then `env_b`, all from one stream seeded by `rng_seed`.
pub fn augment_gaussian(example: &WindowedExample, cfg: &AugmentConfig, rng_seed: u64) -> WindowedExample {
    let mut out = example.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    add_gaussian_noise(out.features.as_slice_mut().expect("standard layout"), cfg.noise_sigma, &mut rng);
    add_gaussian_noise(&mut out.env_a, cfg.noise_sigma, &mut rng);
    add_gaussian_noise(&mut out.env_b, cfg.noise_sigma, &mut rng);
    out
}

/// Training-split z-score statistics: one pair per feature row, one pair
/// shared by both envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub envelope_mean: f64,
    pub envelope_std: f64,
}

fn guard(std: f64) -> f64 {
    if std > 1e-12 && std.is_finite() {
        std
    } else {
        1.0
    }
}

impl Standardization {
    pub fn identity(n_features: usize) -> Self {
        Self {
            feature_mean: vec![0.0; n_features],
            feature_std: vec![1.0; n_features],
            envelope_mean: 0.0,
            envelope_std: 1.0,
        }
    }

    /// Population statistics over every window and sample of `examples`.
    pub fn fit(examples: &[WindowedExample]) -> Self {
        let rows = examples.first().map_or(0, |e| e.features.nrows());
        let mut sum = vec![0.0; rows];
        let mut count = 0usize;
        let (mut env_sum, mut env_count) = (0.0, 0usize);
        for e in examples {
            for (r, row) in e.features.rows().into_iter().enumerate() {
                sum[r] += row.sum();
            }
            count += e.features.ncols();
            env_sum += e.env_a.iter().sum::<f64>() + e.env_b.iter().sum::<f64>();
            env_count += e.env_a.len() + e.env_b.len();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let env_mean = env_sum / env_count.max(1) as f64;
        let mut sq = vec![0.0; rows];
        let mut env_sq = 0.0;
        for e in examples {
            for (r, row) in e.features.rows().into_iter().enumerate() {
                sq[r] += row.iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>();
            }
            env_sq += e.env_a.iter().chain(&e.env_b).map(|v| (v - env_mean).powi(2)).sum::<f64>();
        }
        Self {
            feature_std: sq.iter().map(|s| guard((s / n).sqrt())).collect(),
            feature_mean: mean,
            envelope_mean: env_mean,
            envelope_std: guard((env_sq / env_count.max(1) as f64).sqrt()),
        }
    }

    pub fn apply(&self, example: &WindowedExample) -> WindowedExample {
        let mut out = example.clone();
        for (r, mut row) in out.features.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.feature_mean[r], self.feature_std[r]);
            row.mapv_inplace(|v| (v - m) / s);
        }
        let (m, s) = (self.envelope_mean, self.envelope_std);
        for v in out.env_a.iter_mut().chain(out.env_b.iter_mut()) {
            *v = (*v - m) / s;
        }
        out
    }

    pub fn rounded_to_f32(&self) -> Self {
        let r = |v: f64| v as f32 as f64;
        Self {
            feature_mean: self.feature_mean.iter().map(|&v| r(v)).collect(),
            feature_std: self.feature_std.iter().map(|&v| r(v)).collect(),
            envelope_mean: r(self.envelope_mean),
            envelope_std: r(self.envelope_std),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn example(seed: u64) -> WindowedExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowedExample {
            features: Array2::from_shape_fn((64, 320), |(r, _)| r as f64 + rng.gen_range(-2.0..2.0)),
            env_a: (0..320).map(|_| rng.gen_range(0.0..3.0)).collect(),
            env_b: (0..320).map(|_| rng.gen_range(0.0..5.0)).collect(),
            label: 1,
            subject_id: "s".into(),
            trial_id: "t".into(),
            window_index: 0,
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let e = example(1);
        let cfg = AugmentConfig { noise_sigma: 0.0, standardize: true };
        assert_eq!(augment_gaussian(&e, &cfg, 77), e);
    }

    #[test]
    fn noise_mean_within_standard_error() {
        let e = example(2);
        let cfg = AugmentConfig::default();
        let out = augment_gaussian(&e, &cfg, 5);
        let diff = &out.features - &e.features;
        let n = diff.len() as f64;
        let mean = diff.sum() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "{mean}");
        assert_eq!(out.label, e.label);
    }

    #[test]
    fn seeding_is_deterministic() {
        let e = example(3);
        let cfg = AugmentConfig::default();
        assert_eq!(augment_gaussian(&e, &cfg, 1), augment_gaussian(&e, &cfg, 1));
        assert_ne!(augment_gaussian(&e, &cfg, 1), augment_gaussian(&e, &cfg, 2));
    }

    #[test]
    fn averaging_many_draws_converges() {
        let mut e = example(4);
        e.features = e.features.slice(ndarray::s![..4, ..8]).to_owned();
        e.env_a.truncate(8);
        e.env_b.truncate(8);
        let cfg = AugmentConfig::default();
        let n = 10_000;
        let mut acc = Array2::<f64>::zeros(e.features.dim());
        for s in 0..n {
            acc += &augment_gaussian(&e, &cfg, s as u64).features;
        }
        acc /= n as f64;
        let worst = (&acc - &e.features).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // 32 entries, each within 4.5 standard errors
        assert!(worst < 4.5 / (n as f64).sqrt(), "{worst}");
    }

    #[test]
    fn standardized_training_features() {
        let train: Vec<_> = (0..5).map(example).collect();
        let stats = Standardization::fit(&train);
        let z: Vec<_> = train.iter().map(|e| stats.apply(e)).collect();
        for r in 0..64 {
            let vals: Vec<f64> = z.iter().flat_map(|e| e.features.row(r).to_vec()).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6);
            assert!((sd - 1.0).abs() < 1e-6);
        }
        let env: Vec<f64> = z.iter().flat_map(|e| e.env_a.iter().chain(&e.env_b).copied()).collect();
        let m = env.iter().sum::<f64>() / env.len() as f64;
        assert!(m.abs() < 1e-9);
    }
}
