//! Seeded RNG streams.
//!
//! Every stochastic stage draws from its own ChaCha stream derived from
//! `(seed, stream id)`, so adding draws to one stage never perturbs another
//! (e.g. the mixing-coefficient draws must not shift the batch shuffling).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose-specific RNG stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DataGen = 1,
    ModelInit = 2,
    Batching = 3,
    Mixing = 4,
    Split = 5,
    MonteCarlo = 6,
}

/// RNG for a given seed and stream.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
