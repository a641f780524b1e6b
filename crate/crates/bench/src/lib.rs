//! Inputs shared by the kernel benchmarks.

use fastsearch_core::rng::seeded;
use rand::Rng;

/// Uniform values in [-1, 1) from a fixed stream.
pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, 0xbe4c);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
