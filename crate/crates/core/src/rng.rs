//! Named PRNG substreams.
//!
//! Every random decision in a run is drawn from a ChaCha8 generator keyed by
//! `(run seed, stream, a, b)`. Changing one knob (say, the participation ratio)
//! therefore never perturbs the public-subset sampling or the batch shuffles.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent randomness sources used across the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    PublicSubset = 1,
    Participants = 2,
    TaskCenters = 3,
    PrivatePool = 4,
    PublicPool = 5,
    TestPool = 6,
    Partition = 7,
    ClientInit = 8,
    ServerInit = 9,
    LocalShuffle = 10,
    DistillShuffle = 11,
    ServerShuffle = 12,
    Upload = 13,
    Sweep = 14,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit key from the run seed and a stream coordinate.
pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}

/// Indices of the public subset used at `round`: `per_round` distinct draws
/// from `0..pool_size`, uniform without replacement.
///
/// Shared by the cache-hit simulation and the orchestrator so both see the
/// exact same sampling stream.
pub fn public_subset(seed: u64, round: u32, pool_size: usize, per_round: usize) -> Vec<usize> {
    assert!(per_round <= pool_size, "per_round exceeds pool size");
    let mut rng = substream(seed, Stream::PublicSubset, round as u64, 0);
    index::sample(&mut rng, pool_size, per_round).into_vec()
}
