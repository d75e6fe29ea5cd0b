//! Seeded random streams.
//!
//! Every independent unit of work (a sample, a fold, an iteration) draws from
//! its own ChaCha stream keyed by `(seed, stream)`, so results do not depend on
//! evaluation order or on how many worker threads run the units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a parent seed and a label, for nesting streams.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finaliser over the combined value
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
