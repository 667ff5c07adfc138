//! Deterministic child seeds so parallel work does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a master seed and a stream index into an independent child seed
/// (splitmix64 finalizer over a golden-ratio counter).
pub fn child_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds derived from a path of indices, e.g. `[ratio, site, purpose]`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &i| child_seed(s, i))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
