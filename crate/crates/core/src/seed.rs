//! Stable 64-bit seed derivation. Every random quantity in a trial is drawn
//! from a generator keyed by a hash of its coordinates, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x9e37_79b9_7f4a_7c15, |h, &w| {
        finalize(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ finalize(w))
    })
}

/// Hash of a string, for mixing labels into seeds.
pub fn label(s: &str) -> u64 {
    let mut words = Vec::with_capacity(s.len() / 8 + 1);
    for chunk in s.as_bytes().chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        words.push(u64::from_le_bytes(b));
    }
    words.push(s.len() as u64);
    mix(&words)
}

pub fn rng(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}
