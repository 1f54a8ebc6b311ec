//! Seeded, platform-independent random streams.
//!
//! Every consumer derives its own stream from `(seed, purpose)` so that adding
//! a draw in one stage never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a purpose label (FNV-1a over the label bytes).
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

pub fn seeded(seed: u64, purpose: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: u64 = seeded(7, "x").gen();
        let b: u64 = seeded(7, "x").gen();
        let c: u64 = seeded(7, "y").gen();
        let d: u64 = seeded(8, "x").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
