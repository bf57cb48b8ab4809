//! Named, reproducible random substreams.
//!
//! Every random draw in the engine descends from one top-level seed. Stages and
//! workers obtain their own generator by hashing the parent seed together with a
//! label and an index, so results never depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type EngineRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed, a label and an index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label keeps the mapping stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(splitmix64(index)))
}

pub fn substream(seed: u64, label: &str, index: u64) -> EngineRng {
    EngineRng::seed_from_u64(derive_seed(seed, label, index))
}

/// Stable 64-bit key for tie-breaking, a pure function of (seed, id).
pub fn tie_key(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id))
}
