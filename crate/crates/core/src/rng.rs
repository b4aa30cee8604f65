//! Seeded random number generation shared by every stochastic operation.
//!
//! All randomness flows through [`Rng64`], a ChaCha8 stream cipher generator.
//! Its output is specified bit-for-bit independently of platform, so a seed
//! reproduces the same phantoms, augmentations and training runs everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream label.
///
/// Used where a sub-task needs its own generator (per subject, per fold)
/// without its draws depending on how much the parent stream was consumed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
