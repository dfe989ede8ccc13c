//! Reproducible random streams.
//!
//! Every draw comes from ChaCha8 keyed by the run seed, with the 64-bit
//! ChaCha stream word set to `(stream_id << 32) | index`. `index` is the
//! optimization iteration for per-iteration draws and 0 otherwise, so any
//! draw is addressable from `(seed, stream, index)` without replaying the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Named stream ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Slicing directions.
    Directions = 0,
    /// Subsampling for unequal sample counts.
    Subsample = 1,
    /// Weights, latents and other initial state.
    Init = 2,
    /// Crops and miscellaneous per-iteration draws.
    Crop = 3,
}

pub fn stream(seed: u64, id: Stream, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((id as u64) << 32) | index as u64);
    rng
}

/// First `k` entries of a seeded Fisher–Yates shuffle of `0..n`: a uniform
/// sample of `k` distinct indices.
pub fn sample_without_replacement<R: rand::Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n} without replacement");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
