//! Deterministic random streams.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by a root seed and a
//! short path of tags (device index, round index, purpose, ...). Keys are
//! derived with a SplitMix64 fold so that streams are independent of how many
//! other streams exist: adding a device never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags, so call sites read as `stream(seed, &[tag::ROUND, t])`.
pub mod tag {
    pub const DEVICE: u64 = 1;
    pub const ROUND: u64 = 2;
    pub const LOCAL: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const POPULATION: u64 = 6;
    pub const INIT: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed and a tag path into a 64-bit key.
pub fn derive_key(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Opens the stream identified by `(root, path)`.
pub fn stream(root: u64, path: &[u64]) -> StreamRng {
    let key = derive_key(root, path);
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(key.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
