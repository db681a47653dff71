//! Seeded randomness.
//!
//! Every stochastic component (initialization, dropout masks, splits, graph
//! generation, hyperparameter sampling) draws from ChaCha8 streams seeded with
//! `seed_from_u64`. The stream is defined by the cipher, not by the platform, so
//! a fixed seed reproduces bit-identical draws on every machine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed, e.g. per split or per trial.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
