//! Seeded random streams.
//!
//! Every stochastic unit of work (a user in a period, a replication, a grid
//! point) draws from its own ChaCha stream derived from the master seed, so
//! results do not depend on how the work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that keep substreams for different stages disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Population = 1,
    Assignment = 2,
    Period0 = 3,
    Period1 = 4,
    Attrition = 5,
    Recommender = 6,
    Replication = 7,
    Policy = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose as u64)));
    rng.set_stream(index);
    rng
}

/// Derive a child seed, e.g. one per Monte Carlo replication.
pub fn child_seed(seed: u64, purpose: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ (purpose as u64).rotate_left(32)) ^ index)
}
