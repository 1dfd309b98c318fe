//! Named random streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used to shuffle the training set each epoch.
pub const DATA_SHUFFLE: &str = "data-shuffle";
/// Stream used to draw alignment centres during training.
pub const CENTER_DRAW: &str = "center-draw";
/// Stream used for parameter initialization.
pub const INIT: &str = "init";

/// Mixes `root` with an FNV-1a hash of `stream` through a SplitMix64 finalizer.
pub fn derive(root: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, name))
}
