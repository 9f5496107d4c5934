//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic stage (model init, data generation, batch order,
//! adversarial noise) runs on its own ChaCha stream whose seed is derived
//! from a base seed plus a textual tag. Streams therefore never alias and
//! their draws are stable across platforms and refactors.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `base` and a stream tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha stream for `(base, tag)`.
pub fn stream(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// One standard normal draw via Box-Muller.
///
/// Hand-rolled rather than pulled from a distributions crate so that the
/// exact draw sequence is pinned by this repository alone.
pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Fills a buffer with i.i.d. N(0, sigma^2) draws.
pub fn gauss_vec<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * gauss(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "batch"), derive_seed(7, "batch"));
        assert_ne!(derive_seed(7, "batch"), derive_seed(7, "adv"));
        assert_ne!(derive_seed(7, "batch"), derive_seed(8, "batch"));
    }

    #[test]
    fn gauss_moments_are_sane() {
        let mut rng = stream(0, "gauss-test");
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn streams_reproduce_exactly() {
        let a: Vec<u64> = { let mut r = stream(3, "x"); (0..8).map(|_| r.gen()).collect() };
        let b: Vec<u64> = { let mut r = stream(3, "x"); (0..8).map(|_| r.gen()).collect() };
        assert_eq!(a, b);
    }
}
