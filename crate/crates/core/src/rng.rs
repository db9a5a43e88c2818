//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream addressed by a
//! `(seed, purpose, index)` triple, so the draws an agent sees never depend on
//! thread scheduling or on how many other agents exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purposes are mixed into the seed so that, for example, minibatch sampling
/// and compressor draws of the same agent are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Sampling = 3,
    Compression = 4,
    Certify = 5,
    Run = 6,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(mix(seed) ^ tag)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose as u64));
    rng.set_stream(index);
    rng
}
