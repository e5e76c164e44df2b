//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded from the
//! run seed. Independent consumers (model init, prefix init, data order, ...)
//! read from separate ChaCha streams of the same seed, so adding or removing
//! one consumer never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Ontology = 1,
    Corpus = 2,
    Backbone = 3,
    Prefix = 4,
    DataOrder = 5,
    Dropout = 6,
    Split = 7,
    GradCheck = 8,
}

pub fn rng_for(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
