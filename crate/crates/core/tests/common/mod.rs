//! Shared test support: an independent reference implementation of the
//! primitive math (generic over f32/f64) and a central-difference harness.
//! Everything here is deliberately written as straight-line loops, separate
//! from the graph engine it is used to check.

#![allow(dead_code)]

pub mod reference;
pub mod refmodel;
pub mod toygen;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// |a - b| / max(|a|, |b|, floor)
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
