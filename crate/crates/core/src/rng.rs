//! Seeded randomness helpers.
//!
//! Every stochastic choice in the crate flows from a single `u64` seed through
//! [`derive_seed`], a documented SplitMix64 hash chain. Streams are ChaCha8.
//! Float and index mapping is done by hand from raw `u64` output so results do
//! not depend on distribution-crate internals.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a stream label, and indices.
///
/// The derivation is a SplitMix64 hash chain over the base, the label bytes,
/// and each index, so distinct labels or indices give independent streams.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x51_67_56_45_52_00_00_01);
    for b in label.as_bytes() {
        state = mix(state.wrapping_add(0x9e3779b97f4a7c15) ^ u64::from(*b));
    }
    for ix in indices {
        state = mix(state.wrapping_add(0x9e3779b97f4a7c15) ^ *ix);
    }
    state
}

/// Seeded ChaCha8 stream.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` using the top 53 bits of a `u64`.
pub fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

/// Uniform index in `[0, n)`.
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "index range must be non-empty");
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Samples `k` distinct indices from `[0, n)` via partial Fisher-Yates.
///
/// Returns indices in draw order. Panics if `k > n`.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n} without replacement");
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let j = index(rng, pool.len());
        out.push(pool.swap_remove(j));
    }
    out
}
