//! Keyed random streams.
//!
//! Every stochastic site in a run draws from its own ChaCha stream whose seed
//! is a hash of `(master_seed, purpose, client, round)`. Streams never depend
//! on scheduling, so a run is reproducible for any number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream key and
/// must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    SignInit = 1,
    Embedding = 2,
    TrainData = 3,
    EvalData = 4,
    Partition = 5,
    Participation = 6,
    LocalTraining = 7,
    DpNoise = 8,
    UplinkMask = 9,
    GlobalMask = 10,
    Supermask = 11,
    Eval = 12,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream key into a single 64-bit seed.
pub fn stream_seed(master_seed: u64, purpose: Purpose, client: u32, round: u32) -> u64 {
    let mut h = splitmix64(master_seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ u64::from(client));
    splitmix64(h ^ (u64::from(round) << 32 | 0x5eed))
}

pub fn stream(master_seed: u64, purpose: Purpose, client: u32, round: u32) -> Stream {
    Stream::seed_from_u64(stream_seed(master_seed, purpose, client, round))
}
