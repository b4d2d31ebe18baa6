use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single RNG type used throughout; ChaCha keeps streams stable across
/// platforms and crate upgrades.
pub type VeteRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> VeteRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `master`:
/// `mix64(master + (index + 1) * 0x9E3779B97F4A7C15)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
