//! Deterministic seeding and digest helpers.

use ndarray::{ArrayBase, Data, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Collapse labelled byte parts into one 64-bit stream seed.
pub fn seed_from(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng_from(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_from(parts))
}

/// SHA-256 over an array's shape and element bytes.
pub fn digest_array<S: Data<Elem = f64>, D: Dimension>(a: &ArrayBase<S, D>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((a.ndim() as u64).to_le_bytes());
    for d in a.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in a.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
