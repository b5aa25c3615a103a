//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is mixed
//! from the run seed and a tuple of stream tags, so streams never depend on
//! the order in which other components consumed randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const HELD_OUT: u64 = 2;
    pub const INITIAL_SAMPLE: u64 = 3;
    pub const AUXILIARY: u64 = 4;
    pub const PREDICT_TRAIN: u64 = 5;
    pub const PREDICT_EVAL: u64 = 6;
    pub const ACQUIRE: u64 = 7;
    pub const ANNOTATOR: u64 = 8;
    pub const PSEUDO: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
