//! Deterministic RNG streams keyed by a seed and a list of tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, tags...)`. Same inputs give the same stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}
