//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from one experiment seed through
//! named streams, so reruns with the same seed are bit-identical and
//! adding a new consumer never perturbs existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed for a named stream.
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(base);
    for &b in stream.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Derive a child seed for the `idx`-th element of a named stream.
pub fn derive_seed_indexed(base: u64, stream: &str, idx: u64) -> u64 {
    splitmix64(derive_seed(base, stream) ^ splitmix64(idx.wrapping_add(1)))
}

/// A reproducible RNG for a named stream.
pub fn rng_for(base: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// A reproducible RNG for one element of a named stream.
pub fn rng_indexed(base: u64, stream: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(base, stream, idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "world"), derive_seed(7, "world"));
        assert_ne!(derive_seed(7, "world"), derive_seed(7, "train"));
        assert_ne!(derive_seed(7, "world"), derive_seed(8, "world"));
        assert_ne!(
            derive_seed_indexed(7, "impression", 0),
            derive_seed_indexed(7, "impression", 1)
        );
    }
}
