//! Seed derivation for independent random streams.
//!
//! A run has one global seed. Every consumer (parameter init, per-epoch
//! shuffling, class splits, noise synthesis) draws from its own ChaCha8
//! stream whose seed is `mix(mix(global) ^ mix(stream_tag) ^ mix(index))`,
//! with `mix` the SplitMix64 finalizer. Adding or removing draws in one
//! consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Split = 3,
    Noise = 4,
    Eval = 5,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(global) ^ mix(0xA5A5_0000 + stream as u64) ^ mix(index.wrapping_add(0x5EED)))
}

pub fn stream_rng(global: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stream, index))
}
