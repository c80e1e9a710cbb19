use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every random draw in the toolkit.
///
/// ChaCha with 8 rounds, seeded through `rand_core`'s `seed_from_u64`
/// (a PCG32 stream expands the `u64` into the 32-byte key). The stream is
/// platform independent, so identical seeds give identical corpora, weights
/// and data orders everywhere.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed for a named purpose.
///
/// FNV-1a over `tag`, xor-folded into `seed`, then one SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(tag.as_bytes());
    let mut z = seed ^ h.finish();
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
