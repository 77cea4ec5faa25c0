//! Seed handling.
//!
//! A run is driven by one `u64` seed. Every consumer of randomness draws
//! from its own named substream so that adding or reordering one consumer
//! never disturbs the draws seen by another. A substream key is the
//! SHA-256 of the little-endian seed bytes followed by the label, which
//! feeds a ChaCha12 generator directly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Deterministic generator for the `(seed, label)` substream.
pub fn substream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(key)
}

/// Hex SHA-256 of a byte string. Used for config digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// A `rows x cols` matrix with entries drawn uniformly from `(-bound, bound)`.
///
/// Entries are drawn in row-major order so the result is a pure function of
/// the generator state.
pub fn uniform_init(rng: &mut ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    use rand::Rng;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data).expect("length matches by construction")
}
