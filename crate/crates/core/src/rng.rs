//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! counter-based generator with a documented, platform-independent output
//! stream. Independent consumers of one user seed are separated by the
//! ChaCha stream id rather than by reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the stochastic stages of one pipeline round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synthetic = 1,
    BatchInit = 2,
    TrainInit = 3,
    TrainSampling = 4,
    Annotations = 5,
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `stage` of round `round`, derived from a single user seed.
pub fn stream(seed: u64, round: u64, stage: Stage) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((round << 8) | stage as u64);
    rng
}
