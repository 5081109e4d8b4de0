//! Seeded, stream-separated random number generation.
//!
//! Every consumer derives its generator from `(seed, stream)`, so unrelated
//! draws never share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Keeping them in one place avoids accidental overlap.
pub mod stream {
    pub const MASK: u64 = 1;
    pub const MASK_POISSON: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const LINEAR_DATA: u64 = 4;
    pub const PHANTOM: u64 = 5;
    pub const INIT_GENERATOR: u64 = 6;
    pub const INIT_DISCRIMINATOR: u64 = 7;
    pub const INIT_PERCEPTUAL: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const TRAIN_NOISE: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for the `index`-th item of a seeded family (one phantom, one
/// noise realisation per training step, ...).
pub fn seeded_item(seed: u64, stream: u64, index: u64) -> Rng {
    seeded(
        splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))),
        stream,
    )
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
