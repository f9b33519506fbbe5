//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from the master seed plus a
//! tuple of tags (scene id, epoch, purpose, ...), so results never depend on
//! the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream purposes, mixed into the derived seed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const SPECTRA: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const CONTINUAL: u64 = 7;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(master, tags...)`.
pub fn stream(master: u64, tags: &[u64]) -> Rng {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    Rng::seed_from_u64(h)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Normal draw with standard deviation `std`, resampled until it lies
/// within two standard deviations.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
