//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a value
//! derived here, so results do not depend on thread scheduling or on the
//! order in which samples are generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a list of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F_C0FF_EEu64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream identifiers keep independent consumers from sharing a sequence.
pub mod stream {
    pub const BACKBONE: u64 = 1;
    pub const PROJECTION: u64 = 2;
    pub const STYLE: u64 = 3;
    pub const PROTOTYPES: u64 = 4;
    pub const CONTENT: u64 = 10;
    pub const CORRUPTION: u64 = 11;
    pub const AUGMENT: u64 = 12;
    pub const SHUFFLE: u64 = 13;
    pub const DATA: u64 = 14;
    pub const HELDOUT: u64 = 15;
    pub const GEOMETRY: u64 = 20;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_order_sensitive() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }
}
