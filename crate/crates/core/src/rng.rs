//! Seeded random streams.
//!
//! Every replication derives independent ChaCha streams from one seed, one per
//! source of randomness, so that runs differing only in buyer behavior see the
//! same arrivals, features, noise and exploration prices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Features = 1,
    Groups = 2,
    Noise = 3,
    ExplorationPrice = 4,
    Oracle = 5,
    Data = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed of replication `rep` under `base_seed`.
pub fn replication_seed(base_seed: u64, rep: usize) -> u64 {
    base_seed.wrapping_add(rep as u64)
}
