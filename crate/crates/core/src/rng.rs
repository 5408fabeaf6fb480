//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a SplitMix64 hash of
//! `(seed, labels...)`, so replicate `b` of purpose `p` draws the same numbers
//! no matter which thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose labels for independent streams derived from one seed.
pub mod purpose {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const MONTE_CARLO: u64 = 4;
    pub const TIES: u64 = 5;
    pub const ORACLE: u64 = 6;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit hash.
#[inline]
pub fn hash_words(seed: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    words
        .into_iter()
        .fold(splitmix64(seed), |acc, w| splitmix64(acc ^ splitmix64(w)))
}

/// Stable hash of real coordinates (bit patterns, `-0.0` folded onto `0.0`).
#[inline]
pub fn hash_reals(seed: u64, values: &[f64]) -> u64 {
    hash_words(
        seed,
        values.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }),
    )
}

pub fn stream(seed: u64, labels: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(hash_words(seed, labels.iter().copied()))
}
