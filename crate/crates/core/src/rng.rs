//! Named, seed-derived random streams.
//!
//! Every consumer draws from its own stream (`sim`, `init`, `droppath`,
//! `policy`), so adding draws in one module never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed derived from a parent seed, a stream name and an index.
pub fn derive(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(name)).wrapping_add(index))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, name, 0))
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, name, index))
}
