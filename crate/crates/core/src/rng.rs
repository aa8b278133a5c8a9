//! Keyed random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! `(master seed, replication index, stream name)`. Streams never share state,
//! so the order in which replications are scheduled across threads cannot
//! change any draw, and swapping the pairing policy leaves the exposure and
//! initial-purchase draws of a replication untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const EXPOSURE: &str = "exposure";
pub const WASH: &str = "wash";
pub const PURCHASE: &str = "purchase";
pub const CATALOGUE: &str = "catalogue";

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a; only used to turn stream names into 64-bit keys.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive the stream for `name` within replication `replication`.
pub fn stream(master: u64, replication: u64, name: &str) -> StreamRng {
    let mut state = master;
    let a = splitmix64(&mut state);
    state ^= replication.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let b = splitmix64(&mut state);
    state ^= name_key(name);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);

    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child seed (e.g. a per-respondent or per-cell master seed).
pub fn child_seed(master: u64, index: u64, name: &str) -> u64 {
    let mut state = master ^ name_key(name);
    splitmix64(&mut state);
    state ^= index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    splitmix64(&mut state)
}
