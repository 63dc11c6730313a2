//! Counter-based seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from
//! `(root, counters...)` through SplitMix64 mixing, so parallel tasks draw
//! identical numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a path of counters.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &c| splitmix(acc ^ splitmix(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(root: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

// Stream tags keep independent uses of the same root apart.
pub const TAG_PANEL: u64 = 1;
pub const TAG_TUPLES: u64 = 2;
pub const TAG_BOOTSTRAP: u64 = 3;
pub const TAG_REPLICATION: u64 = 4;
pub const TAG_STARTS: u64 = 5;
pub const TAG_COMMON: u64 = 6;
pub const TAG_NORMALITY: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn distinct_paths_give_distinct_streams() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[2, 1]).random();
        let c: u64 = stream(7, &[1, 2]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
