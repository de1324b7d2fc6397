//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed by `(root seed, component name)`
//! and optionally an index, so results never depend on evaluation order or on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a component name.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(component.as_bytes())))
}

/// Derives a child seed for the `index`-th item of a component.
pub fn derive_indexed(seed: u64, component: &str, index: u64) -> u64 {
    splitmix64(derive_seed(seed, component) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_for(seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, component))
}

pub fn rng_indexed(seed: u64, component: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, component, index))
}
