//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, so changing how much one component draws (for
//! instance naive masking versus modality-aware masking) never shifts the
//! data order or the initial parameters seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Masking = 3,
    Dropout = 4,
    ItmShuffle = 5,
    Modality = 6,
    Corpus = 7,
    PairsTrain = 8,
    PairsTest = 9,
    Probe = 10,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Independent generator for one item of one step, used for dropout so that
/// items can be processed in any order.
pub fn item_rng(base: u64, step: u64, item: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(0x1000 + item);
    rng
}
