//! Small numeric and RNG helpers shared across the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pairwise (cascade) summation. Keeps accumulation error O(log n) and gives
/// the same result regardless of how callers parallelized the production of
/// `values`, since the reduction order is fixed by the slice layout.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean via pairwise summation; 0 for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a reproducible RNG stream from a base seed and a list of tags
/// (sample index, member index, time index, ...). Streams for distinct tag
/// lists are independent, and the derivation does not depend on evaluation
/// order, so parallel and serial runs draw identical values.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for (i, &t) in tags.iter().enumerate() {
        stream = splitmix64(stream ^ t.rotate_left((i as u32 % 8) * 8));
    }
    rng.set_stream(stream);
    rng
}

/// Quantile of the standard normal distribution.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
