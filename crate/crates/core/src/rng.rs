//! The one random generator used everywhere: ChaCha8 seeded from a `u64`.
//!
//! Normal deviates use the Box–Muller transform on `f64` uniforms so that a
//! port only needs ChaCha8 and the 53-bit uniform mapping to reproduce
//! simulated datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform on `[0, 1)`.
pub fn uniform(rng: &mut SimRng) -> f64 {
    rng.random::<f64>()
}

/// Fills `out` with independent standard normal deviates.
pub fn fill_standard_normal(rng: &mut SimRng, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for chunk in &mut chunks {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - uniform(rng);
        let u2 = uniform(rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        chunk[0] = radius * angle.cos();
        if chunk.len() > 1 {
            chunk[1] = radius * angle.sin();
        }
    }
}
