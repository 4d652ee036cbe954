//! Seed derivation. Every stochastic site gets its own generator derived from
//! the run seed plus a path of integers, so results do not depend on call order
//! or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CodaRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with each element of `path` into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive_rng(seed: u64, path: &[u64]) -> CodaRng {
    CodaRng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags used with [`derive_rng`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SUBSAMPLE: u64 = 5;
    pub const EXAMPLE: u64 = 6;
}
