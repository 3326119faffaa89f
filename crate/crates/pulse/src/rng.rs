//! Seed derivation. All randomness in a run flows from one root seed;
//! independent streams are split off by hashing the root with a label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed and a stream label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// A deterministic generator for the given root seed and stream label.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&d);
    ChaCha8Rng::from_seed(seed)
}

/// Standard normal draw via Box-Muller. `rand_distr` is avoided so the
/// exact bit stream is pinned by this crate alone.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
