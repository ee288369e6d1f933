//! Seeded, counter-based random streams.
//!
//! Every resampling iteration draws from its own ChaCha stream keyed by
//! `(seed, stream)`, so results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used when a command is not given one.
pub const DEFAULT_SEED: u64 = 0;

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream 0 of `seed`; the generator for one-shot sampling.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    substream(seed, 0)
}
