//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`SimRng`] derived from a
//! master seed and a list of integer tags, e.g. `(seed, period, sample)`.
//! Streams for different tags are independent, so work can be split across
//! threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_f42d))))
}

pub fn substream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}

/// Hashes a real vector bitwise, for streams keyed by a state.
pub fn hash_state(x: &[f64]) -> u64 {
    x.iter().fold(0xcbf2_9ce4_8422_2325, |acc, v| splitmix64(acc ^ v.to_bits()))
}
