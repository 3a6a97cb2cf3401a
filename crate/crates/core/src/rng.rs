use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser; spreads `(seed, stream)` pairs over the seed space.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named sub-stream `(tag, index)` of a run seed.
pub(crate) fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(tag)) ^ index)
}

/// Deterministic generator for a named sub-stream of a run seed.
pub(crate) fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

pub(crate) mod tags {
    pub const BACKBONE_INIT: u64 = 1;
    pub const IMPUTER_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const SPLIT: u64 = 6;
}
