//! Seed derivation. Every random stream in a run is keyed off the master
//! seed so runs are reproducible and independent of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every seeded stream in the engine.
pub type EngineRng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Replay = 3,
    Memory = 4,
    Split = 5,
    Synthetic = 6,
    Sweep = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with an index into a child seed.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Seed for a purpose-tagged stream at curriculum position `index`.
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    child_seed(child_seed(master, stream as u64), index)
}

pub fn rng(master: u64, stream: Stream, index: u64) -> EngineRng {
    EngineRng::seed_from_u64(derive(master, stream, index))
}
