//! Seeded randomness streams.
//!
//! Every stochastic operation takes an explicit `&mut Stream`. Independent
//! work units derive their own substream from `(seed, tag)` so that fan-out
//! across threads stays reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic substream keyed by `tag`, independent of the parent's position.
pub fn substream(seed: u64, tag: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Fold a sequence of indices into one substream tag.
pub fn tag(parts: &[u64]) -> u64 {
    // splitmix64 chaining
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn gaussian_vec(dim: usize, rng: &mut Stream) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform(lo: f64, hi: f64, rng: &mut Stream) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
