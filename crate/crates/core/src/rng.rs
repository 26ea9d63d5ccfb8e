//! Deterministic RNG derivation.
//!
//! Every random draw in the crate comes from a stream derived from a user
//! seed plus a string tag (parameter name, epoch, example index, ...).
//! Streams are independent of registration order, so adding or removing a
//! parameter never shifts the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string. Also used as the cheap content checksum for
/// binary side files.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from `(seed, tag)`.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a64(tag.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
