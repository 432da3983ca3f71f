//! Named, reproducible random streams.
//!
//! Every random decision draws from a ChaCha8 generator whose seed is derived
//! from a master seed plus a stream name (and optional integer coordinates such
//! as an epoch or node id), so independent consumers never share a stream and
//! reordering code does not perturb other streams.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_CORPUS: &str = "corpus";
pub const STREAM_BATCHING: &str = "batching";
pub const STREAM_NEIGHBORS: &str = "neighbors";
pub const STREAM_TASKS: &str = "tasks";
pub const STREAM_INIT: &str = "init";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the named sub-stream of `master`.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(stream.as_bytes());
    splitmix64(master ^ splitmix64(h.finish()))
}

/// Seed for a coordinate (epoch, node, ...) inside an already-derived stream.
pub fn sub_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, name: &str) -> Rng {
    rng(derive_seed(master, name))
}
