//! Seed derivation and small sampling helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a `u64`, so
//! results are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{to_f64, Scalar};

pub type StdRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Seed of replicate `rep`: `seed ⊕ rep`.
pub fn replicate_seed(seed: u64, rep: u64) -> u64 {
    seed ^ rep
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_categorical<F: Scalar, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += to_f64(p);
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn bernoulli<F: Scalar, R: Rng + ?Sized>(p: F, rng: &mut R) -> bool {
    rng.gen::<f64>() < to_f64(p)
}

/// Draws from a categorical distribution using a precomputed CDF.
pub fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let idx = cdf.partition_point(|&c| c <= u);
    idx.min(cdf.len() - 1)
}

pub fn cdf_of<F: Scalar>(probs: &[F]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|&p| {
            acc += to_f64(p);
            acc
        })
        .collect()
}
