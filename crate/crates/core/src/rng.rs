//! Deterministic per-lane random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for one lane (e.g. a particle) at one step of a run.
///
/// Results depend only on the three keys, never on thread scheduling.
pub fn stream(seed: u64, step: u64, lane: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(step)));
    rng.set_stream(lane);
    rng
}

/// Plain stream from a single seed.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Root seed of run `index` in a batch.
pub fn run_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed.wrapping_add(splitmix(index ^ 0x5851_f42d_4c95_7f2d)))
}
