//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRandomSource = ChaCha8Rng;

/// Independent stream for `(seed, index)`; parallel consumers that each take
/// their own index produce the same values regardless of scheduling.
pub fn stream(seed: u64, index: u64) -> SeededRandomSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a sub-seed for a named purpose (dataset, detector, pam, init, ...).
pub fn sub_seed(seed: u64, salt: &str) -> u64 {
    // splitmix64 over the salt bytes
    let mut z = seed ^ 0x9E3779B97F4A7C15;
    for b in salt.bytes() {
        z = z.wrapping_add(b as u64).wrapping_mul(0xBF58476D1CE4E5B9);
        z ^= z >> 31;
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
