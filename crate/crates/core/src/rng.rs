//! Counter-style random streams.
//!
//! Every consumer of randomness in this crate draws from a ChaCha stream whose
//! key is derived from a user seed plus a small tuple of domain tags (replicate,
//! group, column, ...). Streams with distinct tags are independent, so replicates
//! can run in any order, serially or in parallel, and still produce bit-identical
//! output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(state: u64, tag: u64) -> u64 {
    mix(state ^ mix(tag))
}

/// A ChaCha12 stream keyed by `seed` and a tuple of domain tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = mix(seed ^ 0x5370_696B_654C_6162); // "SpikeLab" salt
    for &t in tags {
        state = absorb(state, t);
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(state.wrapping_add(i as u64 + 1)).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Sub-seed for replicate `rep` of a study keyed by `seed`.
pub fn replicate_seed(seed: u64, rep: u64) -> u64 {
    absorb(mix(seed), rep)
}
