//! Deterministic, splittable random streams.
//!
//! An [`Rng`] is only a 64-bit key. Every consumer derives a child key with
//! [`Rng::fork`] from a tag naming its call site (layer, op, sample index)
//! and draws from a ChaCha8 stream seeded by that key. Draws therefore do
//! not depend on how many values other call sites consumed, which is what
//! lets recomputation, accumulation and resume reproduce identical masks.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream identified by `tag`.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn fork_str(&self, tag: &str) -> Rng {
        // FNV-1a keeps string tags stable across platforms.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.fork(h)
    }

    pub fn stream(&self) -> Stream {
        Stream {
            inner: ChaCha8Rng::seed_from_u64(self.key),
        }
    }
}

/// A sequential draw source derived from an [`Rng`] key.
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is negligible for the small n used here.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
