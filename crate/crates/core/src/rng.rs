//! Seed derivation helpers. Every random stream in the crate is a ChaCha8
//! generator keyed by a base seed plus a tuple of stream coordinates, so the
//! result never depends on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and stream coordinates.
pub fn derive(seed: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(mix(seed.wrapping_add(GOLDEN)), |acc, &s| {
            mix(acc ^ s.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
        })
}

pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, coords))
}
