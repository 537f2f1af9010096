//! Named random substreams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream identifiers. Each consumer draws from its own stream
/// so that changing one consumer never shifts another's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Noise = 3,
    Intervention = 4,
    Shuffle = 5,
    Split = 6,
    Pilot = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// The `index`-th independent instance of `stream`, e.g. one per training
/// stage.
pub fn substream_at(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 | (index + 1) << 8);
    rng
}
