//! Named random substreams derived from a single master seed.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! pure function of the master seed and a path of `(label, index)` pairs, so
//! results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives the seed of substream `(label, index)` below `parent`.
pub fn substream(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ fnv1a(label)).wrapping_add(splitmix64(index)))
}

/// A generator seeded directly from `seed`.
pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A generator for substream `(label, index)` below `parent`.
pub fn sub_rng(parent: u64, label: &str, index: u64) -> Rng {
    rng_from(substream(parent, label, index))
}
