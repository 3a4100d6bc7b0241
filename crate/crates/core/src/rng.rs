//! Seed fan-out.
//!
//! A single integer seed drives every random draw in a run. Each consumer
//! gets its own ChaCha8 stream: the generator is seeded with the run seed and
//! then switched to the stream number of its [`SeedStream`]. Draws in one
//! stream never shift draws in another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    ModelInit = 1,
    AttentionInit = 2,
    BatchShuffle = 3,
    SyntheticCity = 4,
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
