//! Seed derivation and sampling helpers shared across modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mix an ordered list of u64 labels into one seed (splitmix64-style).
/// Used to derive independent, reproducible RNG streams per
/// (purpose, episode, draw) without sharing mutable state.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Standard normal draw via Box-Muller.
pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw clamped into the open unit interval, safe for logit noise.
pub fn rand_open01<R: Rng>(rng: &mut R) -> f64 {
    rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12)
}
