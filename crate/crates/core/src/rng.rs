//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Rng`]. Independent
//! consumers (MC passes, per-epoch shuffles, per-image generation) draw
//! from numbered substreams of one master seed so that results do not
//! depend on the order in which consumers run.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Substream `index` of the master seed `seed`.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A fresh master seed derived from `seed`, for a consumer that itself
/// needs numbered substreams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    substream(seed, tag).next_u64()
}

/// Stream tags used to keep unrelated consumers of one seed apart.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const HETERO_NOISE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const STAGE2: u64 = 6;
    pub const TRAIN_MAPS: u64 = 7;
    pub const PREDICT_STAGE2: u64 = 8;
    pub const MC_PASS: u64 = 1 << 32;
}
