//! Named, deterministic random substreams.
//!
//! Every random decision in a run is drawn from a ChaCha8 generator keyed by
//! the run seed and selected by a stream label plus an index (fold number,
//! tree number, ...). Two substreams with different labels never share state,
//! so re-seeding one component leaves all others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream label for model initialization.
pub const INIT: &str = "init";
/// Stream label for epoch shuffling.
pub const SHUFFLE: &str = "shuffle";
/// Stream label for dropout masks.
pub const DROPOUT: &str = "dropout";
/// Stream label for fold assignment.
pub const FOLDS: &str = "folds";
/// Stream label for class downsampling.
pub const DOWNSAMPLE: &str = "downsample";
/// Stream label for the synthetic cohort generator.
pub const SYNTH: &str = "synth";
/// Stream label for per-tree forest randomness.
pub const TREE: &str = "tree";

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a label and an index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(label)).wrapping_add(index))
}

/// Generator for substream `(label, index)` of `seed`.
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(derive_seed(seed, label, index));
    rng
}
