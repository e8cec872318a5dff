//! Seedable, splittable random streams.
//!
//! Every consumer of randomness derives its own ChaCha substream from a
//! global seed plus a path of labels, so results never depend on the order
//! in which independent streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Stream labels. Distinct purposes never share a substream.
pub mod label {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DP_NOISE: u64 = 4;
    pub const SECURE_AGG: u64 = 5;
    pub const SHADOW: u64 = 6;
    pub const MIA_SAMPLE: u64 = 7;
    pub const ISOLATED: u64 = 8;
    pub const ATTACK: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a seed and a label path into a 256-bit ChaCha key.
pub fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = splitmix64(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Independent substream for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> Rng {
    Rng::from_seed(derive_key(seed, path))
}

/// A 64-bit seed derived the same way, for APIs that want a plain integer.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let key = derive_key(seed, path);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}
