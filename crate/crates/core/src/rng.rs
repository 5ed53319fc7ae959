//! Stream-keyed random number generation.
//!
//! Every stochastic decision in the pipeline draws from a generator derived
//! from a small tuple of integers (run seed, purpose, epoch, item index). The
//! same tuple always yields the same stream, so results do not depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes keep streams for unrelated decisions apart even when the
/// remaining key fields coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    Augment = 3,
    Shuffle = 4,
    Synthetic = 5,
    Bags = 6,
    PseudoBags = 7,
    LabelSelect = 8,
    Probe = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an arbitrary sequence of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let words = [
        mix(&[seed, purpose as u64, a, b]),
        mix(&[seed, purpose as u64, a, b, 1]),
        mix(&[seed, purpose as u64, a, b, 2]),
        mix(&[seed, purpose as u64, a, b, 3]),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut StreamRng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
