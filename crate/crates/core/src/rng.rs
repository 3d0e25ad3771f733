//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! experiment seed and a fixed stream tag, so results never depend on the
//! order in which independent components draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATA: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_SCENARIO: u64 = 3;
pub const STREAM_INIT_BACKBONE: u64 = 4;
pub const STREAM_INIT_PROMPT: u64 = 5;
pub const STREAM_INIT_ADAPTOR: u64 = 6;
pub const STREAM_SERVER: u64 = 7;
pub const STREAM_EVAL: u64 = 8;
pub const STREAM_GRADCHECK: u64 = 9;
pub const STREAM_EVAL_NOISE_BASE: u64 = 1 << 24;
pub const STREAM_CLIENT_BASE: u64 = 1 << 16;
pub const STREAM_TRIAL_BASE: u64 = 1 << 32;

/// Independent stream `tag` of the generator seeded with `seed`.
pub fn substream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn client_stream(seed: u64, client: usize) -> Rng {
    substream(seed, STREAM_CLIENT_BASE + client as u64)
}
