//! Seed derivation from labeled tuples.
//!
//! Every random stream in a run is keyed by a label plus integer coordinates
//! and hashed, so the environment, misspecification and trajectory streams
//! never alias each other the way `base + offset` seeds can.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes `(label, parts...)` into a 64-bit seed.
pub fn derive_seed(label: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labeled_rng(label: &str, parts: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(label, parts))
}

/// Hex SHA-256 of arbitrary bytes; used for environment fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
