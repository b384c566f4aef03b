//! Seeded RNG streams.
//!
//! A single root seed expands into named, independent ChaCha streams so that
//! pretraining, sampling, clustering, and the policy search each stay
//! reproducible on their own. Stream keys are derived with splitmix64 over
//! the root seed and an FNV-1a hash of the stream name.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A derived u64 seed for (`root`, `name`, `index`); used where a nested
/// procedure wants a seed of its own rather than a live stream.
pub fn derive(root: u64, name: &str, index: u64) -> u64 {
    let mut state = root ^ fnv1a(name.as_bytes()) ^ index.wrapping_mul(0xa076_1d64_78bd_642f);
    splitmix64(&mut state)
}

/// A deterministic RNG for (`root`, `name`).
pub fn stream(root: u64, name: &str) -> Stream {
    substream(root, name, 0)
}

/// A deterministic RNG for (`root`, `name`, `index`); used to pre-split
/// per-restart and per-run streams.
pub fn substream(root: u64, name: &str, index: u64) -> Stream {
    let mut state = root ^ fnv1a(name.as_bytes()) ^ index.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    Stream::from_seed(key)
}
