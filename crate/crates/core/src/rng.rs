//! Deterministic random substreams.
//!
//! Every random draw in a guided run is addressed by `(seed, purpose,
//! stream)`. Each address gets its own ChaCha8 generator, so the value of a
//! draw never depends on how many other draws happened before it or on which
//! thread made them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::point::Point2;

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Starting noise `x_T` (or the `z` of a partially noised reference).
    Init,
    /// Noise added by the reverse step at diffusion step `t`.
    Step(usize),
    /// Draw of a reference point for noise-conditioned runs.
    Reference,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Reference => 2,
            Purpose::Step(t) => 0x100 + t as u64,
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN)) ^ index.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Generator for one `(seed, purpose, stream)` address.
pub fn substream(seed: u64, purpose: Purpose, stream: u64) -> ChaCha8Rng {
    let key = derive_seed(derive_seed(seed, purpose.code()), stream);
    ChaCha8Rng::seed_from_u64(key)
}

/// One standard normal 2D draw from a substream address.
pub fn normal2(seed: u64, purpose: Purpose, stream: u64) -> Point2 {
    let mut rng = substream(seed, purpose, stream);
    standard_normal2(&mut rng)
}

pub fn standard_normal2<R: rand::Rng + ?Sized>(rng: &mut R) -> Point2 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    Point2::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addresses_are_reproducible() {
        let a = normal2(7, Purpose::Step(10), 3);
        let b = normal2(7, Purpose::Step(10), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_addresses_differ() {
        let base = normal2(7, Purpose::Step(10), 3);
        assert_ne!(base, normal2(8, Purpose::Step(10), 3));
        assert_ne!(base, normal2(7, Purpose::Step(11), 3));
        assert_ne!(base, normal2(7, Purpose::Step(10), 4));
        assert_ne!(base, normal2(7, Purpose::Init, 3));
        assert_ne!(normal2(7, Purpose::Init, 0), normal2(7, Purpose::Reference, 0));
    }

    #[test]
    fn streams_look_standard_normal() {
        let n = 20_000;
        let draws: Vec<Point2> = (0..n).map(|i| normal2(1, Purpose::Step(5), i)).collect();
        let mean_x = draws.iter().map(|p| p.x).sum::<f64>() / n as f64;
        let var_x = draws.iter().map(|p| (p.x - mean_x).powi(2)).sum::<f64>() / n as f64;
        let cross = draws.iter().map(|p| p.x * p.y).sum::<f64>() / n as f64;
        assert!(mean_x.abs() < 0.03, "{mean_x}");
        assert!((var_x - 1.0).abs() < 0.04, "{var_x}");
        assert!(cross.abs() < 0.03, "{cross}");
    }
}
