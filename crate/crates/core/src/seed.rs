//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! tuple of integers (run seed, epoch, sample id, purpose tag, ...), so results
//! never depend on call order, batch composition or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6D61_7461_6E65_7421u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// ChaCha8 stream for a key tuple.
pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Purpose tags keep independent streams apart even for equal numeric keys.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const TRUNCATE: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const PAIRS: u64 = 7;
}
