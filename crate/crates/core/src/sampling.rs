//! Random streams and the count samplers used by the bootstrap and the
//! validation harness.
//!
//! Every replicate owns a ChaCha20 stream selected by its index under one
//! master seed, so results do not depend on execution order or thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Poisson};

/// Generator for replicate `stream` under `master_seed`.
pub fn replicate_rng(master_seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// One Poisson draw; a non-positive mean yields 0 without consuming randomness.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda)
        .expect("finite positive Poisson mean")
        .sample(rng) as u64
}

/// Multinomial draw by sequential conditional binomials over the categories
/// in order. The last category with positive probability takes the remainder.
pub fn multinomial<R: Rng + ?Sized>(rng: &mut R, trials: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let Some(last) = probs.iter().rposition(|p| *p > 0.0) else {
        return out;
    };
    let mut remaining = trials;
    let mut mass = 1.0;
    for j in 0..last {
        if remaining == 0 {
            break;
        }
        let p = if mass > 0.0 {
            (probs[j] / mass).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let x = Binomial::new(remaining, p)
            .expect("probability in [0, 1]")
            .sample(rng);
        out[j] = x;
        remaining -= x;
        mass -= probs[j];
    }
    out[last] = remaining;
    out
}
