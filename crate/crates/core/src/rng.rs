//! Named random substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by
//! `(global seed, stream name, index)`. Streams are independent of each
//! other, so renaming or reordering one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for the named substream.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then mixed with the seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(splitmix64(index ^ 0x5851_f42d_4c95_7f2d)))
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}
