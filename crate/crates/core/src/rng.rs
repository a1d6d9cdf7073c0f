//! Independent, seed-derived random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the master seed, so changing what one subsystem does (for example which
//! channel a policy picks) never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stream families. The low 32 bits of a stream id carry an index
/// (channel number, GoP index, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Background = 1,
    Mobility = 2,
    Packetize = 3,
    Training = 4,
    Abr = 5,
}

/// Deterministic generator for `(seed, family, index)`.
pub fn stream_rng(seed: u64, family: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((family as u64) << 40) | (index & 0xff_ffff_ffff));
    rng
}
