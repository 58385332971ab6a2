//! Seeded generator used by every stochastic operation.
//!
//! The algorithm is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`); a `u64`
//! seed is expanded to the 256-bit key by `SeedableRng::seed_from_u64`. Stream
//! identifiers select independent keystreams under the same seed.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as DetRng;

pub const DEFAULT_SEED: u64 = 42;

pub fn seeded(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// Generator for sub-task `stream` of a run seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = DetRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
