//! Seed splitting. Every consumer of randomness draws from a named stream
//! derived from the root seed, so changing one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives a child seed from `seed`, a stream name and an index.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(stream)).wrapping_add(splitmix64(index)))
}

/// A ChaCha8 generator for the `(stream, index)` child of `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
