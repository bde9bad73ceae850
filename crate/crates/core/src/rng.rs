//! Seeded random streams.
//!
//! One user-facing seed fans out into independent named streams so that,
//! say, changing how data is generated never perturbs model initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Sampling = 3,
    Negatives = 4,
    Split = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// SplitMix64 finaliser, used to derive per-call seeds from structured keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Data).gen();
        let b: u64 = stream(7, Stream::Data).gen();
        let c: u64 = stream(7, Stream::Init).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
