//! Seed derivation. Every stochastic component takes an explicit generator
//! built from a derived seed so work can be split per sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `seed XOR hash(index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under one seed.
pub fn substream(seed: u64, index: u64, purpose: u64) -> Rng {
    rng_from(derive_seed(
        derive_seed(seed, index),
        purpose.wrapping_mul(0x2545_f491_4f6c_dd1d),
    ))
}
